//! Training schedule: VAE pretraining, then per-minibatch alternation of one
//! regressor update and one encoder/generator update.
//!
//! Randomness comes from [`crate::rng`] streams keyed by the master seed:
//! the shuffle for epoch `e` (pretraining and joint epochs share one counter)
//! uses `SHUFFLE/e`, and the noise of the `k`-th update of each kind uses
//! `PRETRAIN_STEP/k`, `REGRESSOR_STEP/k` or `GENERATOR_STEP/k`.

use std::io::Write;
use std::time::Instant;

use numgrad::{Adam, AdamConfig, NumError, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::{Dims, EncoderParams, GeneratorParams, ModelParams, Network, RegressorParams};
use crate::objectives::{
    loss_generator_total, loss_regressor_total, loss_vae, AttributeBank, LabeledBatch, LatentMode, LossWeights,
    PosteriorNoise, PriorDraw, Session, Trainable,
};
use crate::rng;

/// Plateau-based early stopping on the epoch-mean encoder/generator objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EarlyStop {
    pub patience: usize,
    pub rel_tol: f64,
}

impl Default for EarlyStop {
    fn default() -> Self {
        Self {
            patience: 10,
            rel_tol: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub weights: LossWeights,
    pub lr: f64,
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub joint_epochs: usize,
    pub latent_dim: usize,
    pub hidden: usize,
    pub seed: u64,
    /// Prior draws per update for the generator-side terms; `None` means `batch_size`.
    pub unsup_samples_per_batch: Option<usize>,
    pub latent_mode: LatentMode,
    /// Off unless set.
    pub early_stop: Option<EarlyStop>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            lr: 1e-3,
            batch_size: 64,
            pretrain_epochs: 20,
            joint_epochs: 80,
            latent_dim: 64,
            hidden: 512,
            seed: 0,
            unsup_samples_per_batch: None,
            latent_mode: LatentMode::Both,
            early_stop: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("lr must be a finite value > 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.latent_dim == 0 || self.hidden == 0 {
            return Err(Error::InvalidConfig("latent_dim and hidden must be >= 1".into()));
        }
        if self.unsup_samples_per_batch == Some(0) {
            return Err(Error::InvalidConfig("unsup_samples_per_batch must be >= 1".into()));
        }
        if let Some(es) = self.early_stop {
            if es.patience == 0 || !(es.rel_tol >= 0.0) {
                return Err(Error::InvalidConfig("early_stop needs patience >= 1 and rel_tol >= 0".into()));
            }
        }
        Ok(())
    }

    pub fn unsup_samples(&self) -> usize {
        self.unsup_samples_per_batch.unwrap_or(self.batch_size)
    }

    pub fn dims(&self, features: usize, attributes: usize) -> Result<Dims> {
        Dims::new(features, attributes, self.latent_dim, self.hidden)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Joint,
}

impl Phase {
    fn name(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Joint => "joint",
        }
    }
}

/// One completed epoch. Losses are means over the epoch's minibatches.
/// Serialized fields appear in declaration order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: Phase,
    /// Zero-based, counted across both phases.
    pub epoch: usize,
    pub vae: f64,
    /// Supervised part of the regressor objective (joint epochs only).
    pub sup: Option<f64>,
    /// Full regressor objective (joint epochs only).
    pub regressor: Option<f64>,
    /// Full encoder/generator objective (joint epochs only).
    pub generator: Option<f64>,
    pub wall_secs: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn last(&self, phase: Phase) -> Option<&EpochRecord> {
        self.epochs.iter().rev().find(|r| r.phase == phase)
    }

    /// The records with wall time zeroed, for reproducibility comparisons.
    pub fn without_timing(&self) -> TrainLog {
        TrainLog {
            epochs: self
                .epochs
                .iter()
                .map(|r| EpochRecord { wall_secs: 0.0, ..r.clone() })
                .collect(),
        }
    }

    /// One JSON object per line.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for r in &self.epochs {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("JSON is UTF-8")
    }
}

/// Losses of a single regressor update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegressorStep {
    pub sup: f64,
    pub unsup: f64,
    pub total: f64,
}

/// Losses of a single encoder/generator update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorStep {
    pub vae: f64,
    pub total: f64,
}

/// Parameters plus one Adam state for the regressor and one for the
/// encoder/generator pair.
pub struct Trainer {
    pub params: ModelParams,
    cfg: TrainConfig,
    reg_opt: Adam,
    gen_opt: Adam,
    pretrain_steps: u64,
    reg_steps: u64,
    gen_steps: u64,
    phase: Phase,
    epoch: usize,
    batch: usize,
}

impl Trainer {
    pub fn new(params: ModelParams, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let adam = AdamConfig::with_lr(cfg.lr);
        let reg_opt = Adam::new(adam, params.regressor.tensors());
        let gen_opt = Adam::new(adam, params.encoder.tensors().into_iter().chain(params.generator.tensors()));
        Ok(Self {
            params,
            cfg: cfg.clone(),
            reg_opt,
            gen_opt,
            pretrain_steps: 0,
            reg_steps: 0,
            gen_steps: 0,
            phase: Phase::Pretrain,
            epoch: 0,
            batch: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn into_params(self) -> ModelParams {
        self.params
    }

    fn non_finite(&self, what: impl Into<String>) -> Error {
        Error::NonFinite {
            phase: self.phase.name(),
            what: what.into(),
            epoch: self.epoch,
            batch: self.batch,
        }
    }

    fn check_loss(&self, name: &str, v: f64) -> Result<f64> {
        if v.is_finite() {
            Ok(v)
        } else {
            Err(self.non_finite(format!("{name} loss ({v})")))
        }
    }

    fn map_opt_error(&self, e: NumError, names: &[String]) -> Error {
        match e {
            NumError::NonFiniteGradient { group } => {
                let name = names.get(group).cloned().unwrap_or_else(|| format!("group {group}"));
                self.non_finite(format!("gradient of {name}"))
            }
            other => other.into(),
        }
    }

    fn check_params(&self) -> Result<()> {
        let names = ModelParams::tensor_names();
        for (t, name) in self.params.tensors().into_iter().zip(names) {
            if !t.is_finite() {
                return Err(self.non_finite(format!("parameter {name}")));
            }
        }
        Ok(())
    }

    fn step_encoder_generator(&mut self, grads_e: Vec<Tensor>, grads_g: Vec<Tensor>) -> Result<()> {
        let grads: Vec<Tensor> = grads_e.into_iter().chain(grads_g).collect();
        let mut params: Vec<&mut Tensor> = self.params.encoder.tensors_mut();
        params.extend(self.params.generator.tensors_mut());
        if let Err(e) = self.gen_opt.step(&mut params, &grads) {
            let mut names = EncoderParams::tensor_names();
            names.extend(GeneratorParams::tensor_names());
            return Err(self.map_opt_error(e, &names));
        }
        self.check_params()
    }

    /// One Adam update of the encoder and generator on the VAE loss alone.
    pub fn pretrain_step(&mut self, batch: &LabeledBatch, bank: &AttributeBank) -> Result<f64> {
        let mut r = rng::stream_rng(self.cfg.seed, rng::PRETRAIN_STEP, self.pretrain_steps);
        self.pretrain_steps += 1;
        let noise = PosteriorNoise::sample(&mut r, batch.len(), self.params.dims)?;
        let mut s = Session::new(&self.params, Trainable::ENCODER_GENERATOR);
        let terms = loss_vae(&mut s, batch, bank, &noise)?;
        let vae = self.check_loss("vae", s.value(terms.loss))?;
        let g = s.gradients(terms.loss)?;
        self.step_encoder_generator(g.encoder, g.generator)?;
        Ok(vae)
    }

    /// One Adam update of the regressor on `L_sup + λ_R·L_unsup`; the encoder
    /// and generator are untouched.
    pub fn regressor_step(&mut self, batch: &LabeledBatch, bank: &AttributeBank) -> Result<RegressorStep> {
        let mut r = rng::stream_rng(self.cfg.seed, rng::REGRESSOR_STEP, self.reg_steps);
        self.reg_steps += 1;
        let draw = PriorDraw::sample(&mut r, self.cfg.unsup_samples(), bank, self.params.dims)?;
        let mut s = Session::new(&self.params, Trainable::REGRESSOR);
        let terms = loss_regressor_total(&mut s, batch, &draw, bank, &self.cfg.weights)?;
        let out = RegressorStep {
            sup: s.value(terms.sup),
            unsup: s.value(terms.unsup),
            total: self.check_loss("regressor", s.value(terms.total))?,
        };
        let g = s.gradients(terms.total)?;
        let mut params = self.params.regressor.tensors_mut();
        if let Err(e) = self.reg_opt.step(&mut params, &g.regressor) {
            return Err(self.map_opt_error(e, &RegressorParams::tensor_names()));
        }
        self.check_params()?;
        Ok(out)
    }

    /// One Adam update of the encoder and generator on the full objective;
    /// the regressor is untouched.
    pub fn generator_step(&mut self, batch: &LabeledBatch, bank: &AttributeBank) -> Result<GeneratorStep> {
        let mut r = rng::stream_rng(self.cfg.seed, rng::GENERATOR_STEP, self.gen_steps);
        self.gen_steps += 1;
        let dims = self.params.dims;
        let noise = PosteriorNoise::sample(&mut r, batch.len(), dims)?;
        let draw = PriorDraw::sample(&mut r, self.cfg.unsup_samples(), bank, dims)?;
        let mut s = Session::new(&self.params, Trainable::ENCODER_GENERATOR);
        let terms = loss_generator_total(
            &mut s,
            batch,
            &noise,
            &draw,
            bank,
            &self.cfg.weights,
            self.cfg.latent_mode,
        )?;
        let out = GeneratorStep {
            vae: s.value(terms.vae.loss),
            total: self.check_loss("encoder/generator", s.value(terms.total))?,
        };
        let g = s.gradients(terms.total)?;
        self.step_encoder_generator(g.encoder, g.generator)?;
        Ok(out)
    }
}

/// Validates the training set against the bank: matching widths, and every
/// label a seen class.
fn check_data(data: &LabeledBatch, bank: &AttributeBank, dims: Dims) -> Result<()> {
    if data.is_empty() {
        return Err(Error::EmptyBatch("training data"));
    }
    if data.x.cols() != dims.features {
        return Err(Error::DimMismatch {
            what: "training features",
            expected: dims.features,
            found: data.x.cols(),
        });
    }
    if bank.dim() != dims.attributes {
        return Err(Error::DimMismatch {
            what: "attribute width",
            expected: dims.attributes,
            found: bank.dim(),
        });
    }
    if let Some(&bad) = data.labels.iter().find(|l| !bank.seen().contains(l)) {
        return Err(Error::InvalidConfig(format!("training label {bad} is not a seen class")));
    }
    Ok(())
}

fn shuffled_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream_rng(seed, rng::SHUFFLE, epoch as u64));
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

fn gather_batch(data: &LabeledBatch, idx: &[usize]) -> Result<LabeledBatch> {
    let d = data.x.cols();
    let mut x = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        x.extend_from_slice(data.x.row(i));
    }
    LabeledBatch::new(
        Tensor::matrix(idx.len(), d, x)?,
        idx.iter().map(|&i| data.labels[i]).collect(),
    )
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Runs `cfg.pretrain_epochs` epochs of VAE-only updates. The regressor is untouched.
pub fn pretrain_vae(trainer: &mut Trainer, data: &LabeledBatch, bank: &AttributeBank, log: &mut TrainLog) -> Result<()> {
    check_data(data, bank, trainer.params.dims)?;
    trainer.phase = Phase::Pretrain;
    let cfg = trainer.cfg.clone();
    for _ in 0..cfg.pretrain_epochs {
        let start = Instant::now();
        let epoch = log.epochs.len();
        trainer.epoch = epoch;
        let mut vae = Vec::new();
        for (b, idx) in shuffled_batches(data.len(), cfg.batch_size, cfg.seed, epoch).iter().enumerate() {
            trainer.batch = b;
            vae.push(trainer.pretrain_step(&gather_batch(data, idx)?, bank)?);
        }
        log.epochs.push(EpochRecord {
            phase: Phase::Pretrain,
            epoch,
            vae: mean(&vae),
            sup: None,
            regressor: None,
            generator: None,
            wall_secs: start.elapsed().as_secs_f64(),
        });
    }
    Ok(())
}

/// Runs the alternating phase: per minibatch, one regressor update then one
/// encoder/generator update.
pub fn train_joint(trainer: &mut Trainer, data: &LabeledBatch, bank: &AttributeBank, log: &mut TrainLog) -> Result<()> {
    check_data(data, bank, trainer.params.dims)?;
    trainer.phase = Phase::Joint;
    let cfg = trainer.cfg.clone();
    let mut best = f64::INFINITY;
    let mut stale = 0;
    for _ in 0..cfg.joint_epochs {
        let start = Instant::now();
        let epoch = log.epochs.len();
        trainer.epoch = epoch;
        let (mut vae, mut sup, mut reg, mut gen) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (b, idx) in shuffled_batches(data.len(), cfg.batch_size, cfg.seed, epoch).iter().enumerate() {
            trainer.batch = b;
            let batch = gather_batch(data, idx)?;
            let r = trainer.regressor_step(&batch, bank)?;
            let g = trainer.generator_step(&batch, bank)?;
            sup.push(r.sup);
            reg.push(r.total);
            vae.push(g.vae);
            gen.push(g.total);
        }
        let gen_mean = mean(&gen);
        log.epochs.push(EpochRecord {
            phase: Phase::Joint,
            epoch,
            vae: mean(&vae),
            sup: Some(mean(&sup)),
            regressor: Some(mean(&reg)),
            generator: Some(gen_mean),
            wall_secs: start.elapsed().as_secs_f64(),
        });
        if let Some(es) = cfg.early_stop {
            if !best.is_finite() || gen_mean < best - es.rel_tol * best.abs() {
                best = gen_mean;
                stale = 0;
            } else {
                stale += 1;
                if stale >= es.patience {
                    break;
                }
            }
        }
    }
    Ok(())
}

/// Full schedule from a fresh initialization: pretraining, then joint training.
pub fn train(data: &LabeledBatch, bank: &AttributeBank, cfg: &TrainConfig) -> Result<(ModelParams, TrainLog)> {
    cfg.validate()?;
    let dims = cfg.dims(data.x.cols(), bank.dim())?;
    let params = ModelParams::init(dims, cfg.seed)?;
    train_from(params, data, bank, cfg)
}

/// Full schedule starting from the given parameters.
pub fn train_from(
    params: ModelParams,
    data: &LabeledBatch,
    bank: &AttributeBank,
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainLog)> {
    let mut trainer = Trainer::new(params, cfg)?;
    let mut log = TrainLog::default();
    pretrain_vae(&mut trainer, data, bank, &mut log)?;
    train_joint(&mut trainer, data, bank, &mut log)?;
    Ok((trainer.into_params(), log))
}
