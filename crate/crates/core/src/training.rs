//! Loss, per-sample SGD training loop, checkpoints, and validation.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::metrics::{evaluate_pair, MetricReport, MetricSummary, Stat};
use crate::network::io::{load_params, save_params};
use crate::network::model::{model_backward, model_forward};
use crate::network::params::{ModelParameters, ParamClass, ParameterGradients};
use crate::numerics::{zero_filled, ComplexImageStack};
use crate::sampling::SamplingMask;
use crate::simdata::SampleRecord;

pub const DEFAULT_LEARNING_RATE: f64 = 0.01;
pub const DEFAULT_EPOCHS: usize = 400;
pub const DEFAULT_RHO_FLOOR: f64 = 1e-6;

/// `L = |X - X_ref|^2 / (2 J H W)` over real and imaginary parts, with its gradient.
pub fn mse_loss(out: &ComplexImageStack, reference: &ComplexImageStack) -> Result<(f64, ComplexImageStack)> {
    out.check_same_shape(reference, "loss")?;
    let n = out.shape().len() as f64;
    let diff = out.sub(reference);
    let loss = diff.norm_sqr() / (2.0 * n);
    Ok((loss, diff.scaled(1.0 / n)))
}

/// Update rule applied after every sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OptimizerKind {
    /// `theta <- theta - lr * g`, optionally with heavy-ball momentum.
    #[default]
    Sgd,
    /// Adam with the usual `beta1 = 0.9`, `beta2 = 0.999`, `eps = 1e-8`.
    Adam,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        }
    }
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::InvalidArgument(format!("unknown optimizer {other:?} (sgd, adam)"))),
        }
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// First-order optimizer over the flat parameter vector of
/// [`ModelParameters::entries`], with a floor on every `rho` after each step.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub momentum: f64,
    pub rho_floor: f64,
    steps: u64,
    first: Vec<f64>,
    second: Vec<f64>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        Self {
            kind,
            learning_rate,
            momentum: 0.0,
            rho_floor: DEFAULT_RHO_FLOOR,
            steps: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn sgd(learning_rate: f64) -> Self {
        Self::new(OptimizerKind::Sgd, learning_rate)
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Apply one update. A non-finite gradient leaves `params` untouched.
    pub fn step(&mut self, params: &mut ModelParameters, grads: &ParameterGradients) -> Result<()> {
        let entries = params.entries();
        let mut g = Vec::with_capacity(entries.len());
        for (r, _) in &entries {
            let v = grads.get(r).ok_or_else(|| {
                Error::ShapeMismatch(format!("gradients lack {} of stage {}", r.class, r.stage))
            })?;
            if !v.is_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient of {} (stage {}, substage {}, index {})",
                    r.class, r.stage, r.substage, r.index
                )));
            }
            g.push(v);
        }
        if self.first.len() != g.len() {
            self.first = vec![0.0; g.len()];
            self.second = vec![0.0; g.len()];
        }
        self.steps += 1;
        let lr = self.learning_rate;
        let delta: Vec<f64> = match self.kind {
            OptimizerKind::Sgd if self.momentum == 0.0 => g.iter().map(|gi| lr * gi).collect(),
            OptimizerKind::Sgd => self
                .first
                .iter_mut()
                .zip(&g)
                .map(|(v, gi)| {
                    *v = self.momentum * *v + gi;
                    lr * *v
                })
                .collect(),
            OptimizerKind::Adam => {
                let t = self.steps as i32;
                let c1 = 1.0 - ADAM_BETA1.powi(t);
                let c2 = 1.0 - ADAM_BETA2.powi(t);
                self.first
                    .iter_mut()
                    .zip(self.second.iter_mut())
                    .zip(&g)
                    .map(|((m, v), gi)| {
                        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * gi;
                        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * gi * gi;
                        lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS)
                    })
                    .collect()
            }
        };
        for ((r, _), d) in entries.iter().zip(&delta) {
            let p = params.get_mut(r).expect("entry refers to an existing field");
            *p -= d;
            if r.class == ParamClass::Rho && *p < self.rho_floor {
                *p = self.rho_floor;
            }
        }
        Ok(())
    }

    /// Moment buffers and step count, for exact resumption.
    pub fn write_state(&self, mut out: impl Write) -> Result<()> {
        out.write_all(OPT_MAGIC)?;
        out.write_all(&self.steps.to_le_bytes())?;
        out.write_all(&(self.first.len() as u64).to_le_bytes())?;
        for v in self.first.iter().chain(&self.second) {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_state(&mut self, mut input: impl std::io::Read) -> Result<()> {
        let mut word = [0u8; 8];
        let mut magic = [0u8; 4];
        crate::simdata::read_exact_or(&mut input, &mut magic, "optimizer magic")?;
        if &magic != OPT_MAGIC {
            return Err(Error::BadMagic {
                expected: String::from_utf8_lossy(OPT_MAGIC).into_owned(),
                found: String::from_utf8_lossy(&magic).into_owned(),
            });
        }
        crate::simdata::read_exact_or(&mut input, &mut word, "optimizer steps")?;
        let steps = u64::from_le_bytes(word);
        crate::simdata::read_exact_or(&mut input, &mut word, "optimizer size")?;
        let n = u64::from_le_bytes(word) as usize;
        let mut vals = Vec::with_capacity(2 * n);
        for _ in 0..2 * n {
            crate::simdata::read_exact_or(&mut input, &mut word, "optimizer moments")?;
            vals.push(f64::from_le_bytes(word));
        }
        self.steps = steps;
        self.second = vals.split_off(n);
        self.first = vals;
        Ok(())
    }
}

const OPT_MAGIC: &[u8; 4] = b"PMOS";

/// One SGD step without momentum.
pub fn sgd_step(params: &mut ModelParameters, grads: &ParameterGradients, lr: f64, rho_floor: f64) -> Result<()> {
    Optimizer {
        rho_floor,
        ..Optimizer::sgd(lr)
    }
    .step(params, grads)
}

/// Simulated records with the masks their `mask_id`s refer to.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub records: Vec<SampleRecord>,
    pub masks: Vec<SamplingMask>,
}

impl Dataset {
    pub fn new(records: Vec<SampleRecord>, masks: Vec<SamplingMask>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::InvalidArgument("dataset is empty".into()));
        }
        for (i, r) in records.iter().enumerate() {
            let m = masks.get(r.mask_id as usize).ok_or_else(|| {
                Error::InvalidArgument(format!("record {i} refers to mask {} of {}", r.mask_id, masks.len()))
            })?;
            let s = r.shape();
            if m.height() != s.height || m.width() != s.width {
                return Err(Error::ShapeMismatch(format!(
                    "record {i} is {s}, mask {} is {}x{}",
                    r.mask_id,
                    m.height(),
                    m.width()
                )));
            }
        }
        Ok(Self { records, masks })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn mask(&self, index: usize) -> &SamplingMask {
        &self.masks[self.records[index].mask_id as usize]
    }

    pub fn subset(&self, range: std::ops::Range<usize>) -> Result<Self> {
        Self::new(self.records[range].to_vec(), self.masks.clone())
    }
}

/// Network reconstruction of record `index`.
pub fn reconstruct(params: &ModelParameters, data: &Dataset, index: usize) -> Result<ComplexImageStack> {
    Ok(model_forward(&data.records[index].undersampled_kspace, data.mask(index), params)?.0)
}

pub fn reconstruct_zero_filled(data: &Dataset, index: usize) -> Result<ComplexImageStack> {
    zero_filled(&data.records[index].undersampled_kspace, data.mask(index))
}

/// Loss and gradients of one record.
pub fn sample_loss_and_grad(
    params: &ModelParameters,
    data: &Dataset,
    index: usize,
) -> Result<(f64, ParameterGradients)> {
    let rec = &data.records[index];
    let (out, tape) = model_forward(&rec.undersampled_kspace, data.mask(index), params)?;
    let (loss, g) = mse_loss(&out, &rec.coil_images)?;
    Ok((loss, model_backward(&tape, &g, params)?))
}

pub fn sample_loss(params: &ModelParameters, data: &Dataset, index: usize) -> Result<f64> {
    let rec = &data.records[index];
    let out = reconstruct(params, data, index)?;
    Ok(mse_loss(&out, &rec.coil_images)?.0)
}

/// Per-record metrics of the network output against the ground-truth coil images.
pub fn evaluate_dataset(params: &ModelParameters, data: &Dataset) -> Result<Vec<MetricReport>> {
    (0..data.len())
        .map(|i| evaluate_pair(&reconstruct(params, data, i)?, &data.records[i].coil_images))
        .collect()
}

pub fn evaluate_zero_filled(data: &Dataset) -> Result<Vec<MetricReport>> {
    (0..data.len())
        .map(|i| evaluate_pair(&reconstruct_zero_filled(data, i)?, &data.records[i].coil_images))
        .collect()
}

/// Mean/std NMSE, PSNR and SSIM of the network on `data`.
pub fn validate(params: &ModelParameters, data: &Dataset) -> Result<MetricSummary> {
    Ok(MetricSummary::of(&evaluate_dataset(params, data)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub shuffle_seed: u64,
    /// Write a checkpoint every this many epochs (0 disables checkpoints).
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
    pub rho_floor: f64,
    pub momentum: f64,
    pub optimizer: OptimizerKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: DEFAULT_LEARNING_RATE,
            epochs: DEFAULT_EPOCHS,
            shuffle_seed: 0,
            checkpoint_every: 0,
            checkpoint_dir: None,
            rho_floor: DEFAULT_RHO_FLOOR,
            momentum: 0.0,
            optimizer: OptimizerKind::Sgd,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be >= 0, got {}",
                self.learning_rate
            )));
        }
        if self.epochs < 1 {
            return Err(Error::InvalidArgument("epochs must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.rho_floor > 0.0) {
            return Err(Error::InvalidArgument("rho floor must be > 0".into()));
        }
        if self.checkpoint_every > 0 && self.checkpoint_dir.is_none() {
            return Err(Error::InvalidArgument("checkpoints need a directory".into()));
        }
        Ok(())
    }
}

/// One row of the training log. Epoch 0 describes the initial parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_nmse: f64,
    pub val_psnr: f64,
    pub val_ssim: f64,
    pub seconds: f64,
}

impl EpochRecord {
    /// Equality ignoring wall time.
    pub fn same_values(&self, other: &Self) -> bool {
        let bits = |r: &Self| {
            [r.train_loss, r.val_nmse, r.val_psnr, r.val_ssim].map(f64::to_bits)
        };
        self.epoch == other.epoch && bits(self) == bits(other)
    }
}

pub const TRAIN_LOG_HEADER: &str = "epoch,train_loss,val_nmse,val_psnr,val_ssim,seconds";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn last_epoch(&self) -> Option<usize> {
        self.records.last().map(|r| r.epoch)
    }

    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "{TRAIN_LOG_HEADER}")?;
        for r in &self.records {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.epoch, r.train_loss, r.val_nmse, r.val_psnr, r.val_ssim, r.seconds
            )?;
        }
        Ok(())
    }

    pub fn read_csv(input: impl BufRead) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines.next().transpose()?;
        if header.as_deref().map(str::trim) != Some(TRAIN_LOG_HEADER) {
            return Err(Error::Malformed("training log header".into()));
        }
        let mut records = Vec::new();
        for (n, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::Malformed(format!("training log line {}: {line:?}", n + 2));
            if f.len() != 6 {
                return Err(bad());
            }
            let num = |i: usize| f[i].trim().parse::<f64>().map_err(|_| bad());
            records.push(EpochRecord {
                epoch: f[0].trim().parse().map_err(|_| bad())?,
                train_loss: num(1)?,
                val_nmse: num(2)?,
                val_psnr: num(3)?,
                val_ssim: num(4)?,
                seconds: num(5)?,
            });
        }
        Ok(Self { records })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_csv(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_csv(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    /// Equality ignoring wall time.
    pub fn same_values(&self, other: &Self) -> bool {
        self.records.len() == other.records.len()
            && self.records.iter().zip(&other.records).all(|(a, b)| a.same_values(b))
    }
}

pub const LATEST_CHECKPOINT: &str = "latest.pmnw";
pub const CHECKPOINT_LOG: &str = "train_log.csv";
pub const CHECKPOINT_OPTIMIZER: &str = "optimizer.state";

pub fn checkpoint_name(epoch: usize) -> String {
    format!("epoch_{epoch:04}.pmnw")
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ModelParameters,
    pub log: TrainLog,
    pub optimizer: Optimizer,
}

/// The most recent checkpoint in `dir`.
pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Checkpoint> {
    let dir = dir.as_ref();
    let mut optimizer = Optimizer::sgd(0.0);
    optimizer.read_state(std::io::BufReader::new(std::fs::File::open(dir.join(CHECKPOINT_OPTIMIZER))?))?;
    Ok(Checkpoint {
        params: load_params(dir.join(LATEST_CHECKPOINT))?,
        log: TrainLog::load(dir.join(CHECKPOINT_LOG))?,
        optimizer,
    })
}

fn write_checkpoint(dir: &Path, epoch: usize, params: &ModelParameters, log: &TrainLog, opt: &Optimizer) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    save_params(params, dir.join(checkpoint_name(epoch)))?;
    save_params(params, dir.join(LATEST_CHECKPOINT))?;
    let mut w = std::io::BufWriter::new(std::fs::File::create(dir.join(CHECKPOINT_OPTIMIZER))?);
    opt.write_state(&mut w)?;
    w.flush()?;
    log.save(dir.join(CHECKPOINT_LOG))
}

/// Visiting order of epoch `epoch` (1-based); depends only on the seed and the epoch.
pub fn epoch_order(seed: u64, epoch: usize, len: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add((epoch as u64).wrapping_mul(0xD1B5_4A32_D192_ED03)));
    order.shuffle(&mut rng);
    order
}

fn val_row(epoch: usize, train_loss: f64, val: Option<&Dataset>, params: &ModelParameters, t0: Instant) -> Result<EpochRecord> {
    let summary = match val {
        Some(v) => Some(validate(params, v)?),
        None => None,
    };
    let pick = |f: fn(&MetricSummary) -> Stat| summary.as_ref().map_or(f64::NAN, |s| f(s).mean);
    Ok(EpochRecord {
        epoch,
        train_loss,
        val_nmse: pick(|s| s.nmse),
        val_psnr: pick(|s| s.psnr),
        val_ssim: pick(|s| s.ssim),
        seconds: t0.elapsed().as_secs_f64(),
    })
}

/// Where a run starts: fresh parameters, or a checkpoint.
#[derive(Debug, Clone)]
pub enum StartFrom {
    Init(ModelParameters),
    Resume(Checkpoint),
}

/// Per-sample optimization over `config.epochs` epochs.
///
/// Each epoch visits the training records in [`epoch_order`]. The log begins
/// with an epoch-0 row for the starting parameters. A non-finite loss or
/// gradient stops training with [`Error::NonFinite`]; checkpoints already
/// written stay on disk.
pub fn train(
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    config: &TrainConfig,
    start: StartFrom,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(ModelParameters, TrainLog)> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let mut opt = Optimizer {
        momentum: config.momentum,
        rho_floor: config.rho_floor,
        ..Optimizer::new(config.optimizer, config.learning_rate)
    };
    let t0 = Instant::now();
    let mut offset = 0.0;
    let (mut params, mut log) = match start {
        StartFrom::Init(p) => {
            p.validate()?;
            let mut loss = 0.0;
            for i in 0..train_set.len() {
                loss += sample_loss(&p, train_set, i)?;
            }
            let row = val_row(0, loss / train_set.len() as f64, val_set, &p, t0)?;
            on_epoch(&row);
            (p, TrainLog { records: vec![row] })
        }
        StartFrom::Resume(cp) => {
            cp.params.validate()?;
            let last = cp
                .log
                .records
                .last()
                .ok_or_else(|| Error::Malformed("resumed training log is empty".into()))?;
            offset = last.seconds;
            opt.steps = cp.optimizer.steps;
            opt.first = cp.optimizer.first;
            opt.second = cp.optimizer.second;
            (cp.params, cp.log)
        }
    };
    let first = log.last_epoch().unwrap_or(0) + 1;
    for epoch in first..=config.epochs {
        let mut total = 0.0;
        for i in epoch_order(config.shuffle_seed, epoch, train_set.len()) {
            let (loss, grads) = sample_loss_and_grad(&params, train_set, i)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {epoch}, record {i}")));
            }
            total += loss;
            opt.step(&mut params, &grads)?;
        }
        let mut row = val_row(epoch, total / train_set.len() as f64, val_set, &params, t0)?;
        row.seconds += offset;
        on_epoch(&row);
        log.records.push(row);
        if config.checkpoint_every > 0 && (epoch % config.checkpoint_every == 0 || epoch == config.epochs) {
            let dir = config.checkpoint_dir.as_deref().expect("validated");
            write_checkpoint(dir, epoch, &params, &log, &opt)?;
        }
    }
    Ok((params, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::params::{init_params, NetworkConfig, ParamRef};
    use crate::numerics::Shape;
    use crate::sampling::gen_uniform_1d;
    use crate::simdata::{simulate_dataset, SimConfig};
    use num_complex::Complex64;
    use rand::Rng;

    fn small_data(count: usize, size: usize) -> Dataset {
        let mask = gen_uniform_1d(size, size, 3.0, 4, 0).unwrap();
        let cfg = SimConfig::new(2, size, size);
        Dataset::new(simulate_dataset(&cfg, std::slice::from_ref(&mask), count).unwrap(), vec![mask]).unwrap()
    }

    fn small_net(stages: usize) -> ModelParameters {
        init_params(&NetworkConfig {
            stages,
            filters: 4,
            knots: 9,
            ..NetworkConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn mse_loss_cases() {
        let one = Shape::new(1, 2, 2).unwrap();
        let a = ComplexImageStack::from_fn(one, |_, y, x| Complex64::new((y + x) as f64, 1.0));
        let (l, g) = mse_loss(&a, &a).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(g.norm(), 0.0);

        // 2x2 stack with one nonzero difference of 2: JHW = 4
        let mut b = a.clone();
        b.set(0, 0, 0, a.get(0, 0, 0) + 2.0);
        let (l, g) = mse_loss(&b, &a).unwrap();
        assert_eq!(l, 4.0 / 8.0);
        assert_eq!(g.get(0, 0, 0), Complex64::new(0.5, 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = Shape::new(3, 4, 5).unwrap();
        let mut rand = || ComplexImageStack::from_fn(s, |_, _, _| Complex64::new(rng.random(), rng.random()));
        let (x, r) = (rand(), rand());
        let brute: f64 = x
            .as_slice()
            .iter()
            .zip(r.as_slice())
            .map(|(p, q)| (p.re - q.re).powi(2) + (p.im - q.im).powi(2))
            .sum::<f64>()
            / (2.0 * 60.0);
        assert!((mse_loss(&x, &r).unwrap().0 - brute).abs() < 1e-12);
        assert!(mse_loss(&x, &ComplexImageStack::zeros(one)).is_err());
    }

    fn scalar_ref(class: ParamClass) -> ParamRef {
        ParamRef {
            stage: 0,
            substage: 0,
            class,
            index: 0,
        }
    }

    #[test]
    fn sgd_arithmetic_and_clamp() {
        let mut p = small_net(1);
        p.stages[0].substages[0].mu1 = 1.0;
        let mut g = ParameterGradients::zeros_like(&p);
        g.stages[0].substages[0].mu1 = 0.5;
        let before = p.clone();
        sgd_step(&mut p, &g, 0.0, DEFAULT_RHO_FLOOR).unwrap();
        assert_eq!(p, before);
        sgd_step(&mut p, &g, 0.01, DEFAULT_RHO_FLOOR).unwrap();
        assert_eq!(p.get(&scalar_ref(ParamClass::Mu1)), Some(0.995));

        g.stages[0].rho = 100.0;
        sgd_step(&mut p, &g, 0.01, DEFAULT_RHO_FLOOR).unwrap();
        assert_eq!(p.stages[0].rho, 1e-6);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = small_net(2);
        let mut g = ParameterGradients::zeros_like(&p);
        g.stages[1].substages[0].w2[2][5] = f64::NAN;
        let before = p.clone();
        let err = sgd_step(&mut p, &g, 0.01, DEFAULT_RHO_FLOOR).unwrap_err().to_string();
        assert!(err.contains("w2") && err.contains("stage 1") && err.contains("index 59"), "{err}");
        assert_eq!(p, before);
    }

    #[test]
    fn momentum_accumulates() {
        let mut p = small_net(1);
        let eta0 = p.stages[0].eta;
        let mut g = ParameterGradients::zeros_like(&p);
        g.stages[0].eta = 1.0;
        let mut opt = Optimizer {
            momentum: 0.5,
            ..Optimizer::sgd(0.1)
        };
        opt.step(&mut p, &g).unwrap();
        opt.step(&mut p, &g).unwrap();
        assert!((p.stages[0].eta - (eta0 - 0.1 - 0.15)).abs() < 1e-15);
    }

    #[test]
    fn zero_rate_epoch_keeps_init() {
        let data = small_data(1, 16);
        let init = small_net(1);
        let cfg = TrainConfig {
            learning_rate: 0.0,
            epochs: 1,
            ..TrainConfig::default()
        };
        let (p, log) = train(&data, None, &cfg, StartFrom::Init(init.clone()), |_| {}).unwrap();
        assert_eq!(p, init);
        assert_eq!(log.records.len(), 2);
        assert_eq!(log.records[0].epoch, 0);
    }

    #[test]
    fn validate_identities() {
        let data = small_data(2, 16);
        for i in 0..2 {
            let truth = &data.records[i].coil_images;
            let m = evaluate_pair(truth, truth).unwrap();
            assert_eq!((m.nmse, m.ssim), (0.0, 1.0));
            let z = evaluate_pair(&ComplexImageStack::zeros(truth.shape()), truth).unwrap();
            assert_eq!(z.nmse, 1.0);
        }
    }

    #[test]
    fn log_csv_roundtrip() {
        let log = TrainLog {
            records: vec![
                EpochRecord {
                    epoch: 0,
                    train_loss: 0.125,
                    val_nmse: f64::NAN,
                    val_psnr: 31.5,
                    val_ssim: 0.9,
                    seconds: 1.25,
                },
                EpochRecord {
                    epoch: 1,
                    train_loss: 1.0 / 3.0,
                    val_nmse: 0.1,
                    val_psnr: 32.0,
                    val_ssim: 0.91,
                    seconds: 2.5,
                },
            ],
        };
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(TRAIN_LOG_HEADER));
        let back = TrainLog::read_csv(buf.as_slice()).unwrap();
        assert!(back.same_values(&log));
        assert!(TrainLog::read_csv("nope\n".as_bytes()).is_err());
    }

    #[test]
    fn epoch_order_is_a_seeded_permutation() {
        let a = epoch_order(3, 1, 20);
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, (0..20).collect::<Vec<_>>());
        assert_eq!(a, epoch_order(3, 1, 20));
        assert_ne!(a, epoch_order(3, 2, 20));
    }

    #[test]
    fn dataset_rejects_unknown_mask() {
        let data = small_data(1, 16);
        assert!(Dataset::new(data.records.clone(), vec![]).is_err());
        assert!(Dataset::new(vec![], data.masks.clone()).is_err());
    }
}
