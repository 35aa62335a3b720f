//! Losses, optimizer, synthetic data and the epoch loop.

pub mod data;
pub mod loss;
pub mod optim;

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{arg_err, Error, Result};
use crate::model::TmUnet;
use crate::nn::{Mode, ParamStore, Session};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use data::{collate, synth_dataset, SegmentationSample};
pub use loss::{bce_loss, dice_loss, joint_loss, LossWeights, DICE_SMOOTH};
pub use optim::Adam;

/// Independent random streams derived from one root seed.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const DATA: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const TEST_DATA: u64 = 4;
}

pub fn seeded_rng(seed: u64, stream: u64) -> rand_chacha::ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    /// Per-epoch multiplicative decay.
    pub decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-4,
            decay: 0.98,
            batch_size: 16,
            epochs: 200,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) {
            return Err(Error::Config {
                key: "train.lr0".into(),
                msg: "must be positive".into(),
            });
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::Config {
                key: "train.decay".into(),
                msg: "must lie in (0, 1]".into(),
            });
        }
        if self.batch_size == 0 {
            return Err(Error::Config {
                key: "train.batch_size".into(),
                msg: "must be positive".into(),
            });
        }
        Ok(())
    }
}

pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * cfg.decay.powi(epoch as i32)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub const HEADER: &'static str = "epoch,lr,mean_loss,wall_ms";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{:e},{:e},{}",
                r.epoch, r.lr, r.mean_loss, r.wall_ms
            );
        }
        out
    }

    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.mean_loss).collect()
    }
}

/// One optimizer step on a batch; returns the loss.
pub fn train_step<T: Scalar>(
    model: &TmUnet,
    store: &mut ParamStore<T>,
    opt: &mut Adam<T>,
    x: Tensor<T>,
    y: &Tensor<T>,
    w: LossWeights,
    lr: f64,
) -> Result<f64> {
    let mut s = Session::new(store, Mode::Train);
    let xv = s.input(x);
    let logits = model.forward(&mut s, xv)?;
    let loss = s.tape.joint_loss(logits, y, w)?;
    let value = s.value(loss).item().to_f64().unwrap_or(f64::NAN);
    s.backward(loss)?;
    drop(s);
    opt.step(store, lr)?;
    Ok(value)
}

/// Shuffled mini-batch epochs of forward, joint loss, backward and Adam.
/// `on_epoch` sees every record with the updated parameters.
pub fn train<T: Scalar>(
    model: &TmUnet,
    store: &mut ParamStore<T>,
    data: &[SegmentationSample<T>],
    cfg: &TrainConfig,
    w: LossWeights,
    mut on_epoch: impl FnMut(&EpochRecord, &ParamStore<T>) -> Result<()>,
) -> Result<TrainLog> {
    cfg.validate()?;
    w.validate()?;
    if data.is_empty() {
        return arg_err("train", "empty dataset");
    }
    let mut opt = Adam::new(store);
    let mut rng = seeded_rng(cfg.seed, stream::SHUFFLE);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let lr = lr_schedule(epoch, cfg);
        order.shuffle(&mut rng);
        let (mut total, mut count) = (0.0, 0usize);
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&SegmentationSample<T>> = idx.iter().map(|&i| &data[i]).collect();
            let (x, y) = collate(&batch)?;
            let loss = match train_step(model, store, &mut opt, x, &y, w, lr) {
                Ok(l) if l.is_finite() => l,
                Ok(_) | Err(Error::NonFinite { .. }) => return Err(Error::Divergence { epoch }),
                Err(e) => return Err(e),
            };
            total += loss * idx.len() as f64;
            count += idx.len();
        }
        let rec = EpochRecord {
            epoch,
            lr,
            mean_loss: total / count as f64,
            wall_ms: start.elapsed().as_millis() as u64,
        };
        on_epoch(&rec, store)?;
        log.records.push(rec);
    }
    Ok(log)
}

/// Eval-mode logits for a batch.
pub fn predict<T: Scalar>(
    model: &TmUnet,
    store: &mut ParamStore<T>,
    x: Tensor<T>,
) -> Result<Tensor<T>> {
    let mut s = Session::new(store, Mode::Eval);
    let xv = s.input(x);
    let y = model.forward(&mut s, xv)?;
    Ok(s.value(y).clone())
}
