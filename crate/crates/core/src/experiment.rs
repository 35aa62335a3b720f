//! End-to-end runs: data loading, training with on-disk artifacts, and
//! checkpoint evaluation.

use std::path::{Path, PathBuf};

use rand::RngCore;

use crate::error::{arg_err, Error, Result};
use crate::io::checkpoint::{self, Checkpoint};
use crate::io::config::RunConfig;
use crate::io::pnm::{load_image, load_mask, save_mask};
use crate::metrics::{score_pair, Mask, MaskPair, MetricsReport};
use crate::model::TmUnet;
use crate::nn::ParamStore;
use crate::tensor::Tensor;
use crate::train::{
    collate, predict, seeded_rng, stream, synth_dataset, train, SegmentationSample, TrainLog,
};

pub const CONFIG_FILE: &str = "config.txt";
pub const LOG_FILE: &str = "train_log.csv";
pub const FINAL_CHECKPOINT: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const MASK_DIR: &str = "masks";

pub type Named<T> = (String, SegmentationSample<T>);

pub fn epoch_checkpoint_name(epoch: usize) -> String {
    format!("epoch_{epoch:04}.ckpt")
}

/// `NAME.ppm` images paired with `NAME_mask.pgm` masks, sorted by name.
/// Images without a mask are ignored.
pub fn load_dir<T: crate::Scalar>(dir: &Path) -> Result<Vec<Named<T>>> {
    let mut names: Vec<String> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            e.file_name()
                .to_str()
                .and_then(|n| n.strip_suffix(".ppm"))
                .map(str::to_string)
        })
        .filter(|n| dir.join(format!("{n}_mask.pgm")).is_file())
        .collect();
    names.sort();
    if names.is_empty() {
        return arg_err(
            "load_dir",
            format!("no NAME.ppm / NAME_mask.pgm pairs in {}", dir.display()),
        );
    }
    names
        .into_iter()
        .map(|n| {
            let image = load_image(&dir.join(format!("{n}.ppm")))?;
            let mask = load_mask(&dir.join(format!("{n}_mask.pgm")))?;
            if image.shape()[1..] != mask.shape()[1..] {
                return crate::error::shape_err(
                    "load_dir",
                    format!("`{n}` image and mask extents differ"),
                );
            }
            Ok((n, SegmentationSample { image, mask }))
        })
        .collect()
}

/// Training or held-out samples for a run. A data directory serves both.
pub fn load_split<T: crate::Scalar>(cfg: &RunConfig, held_out: bool) -> Result<Vec<Named<T>>> {
    if let Some(dir) = &cfg.data.dir {
        return load_dir(dir);
    }
    let (n, s) = if held_out {
        (cfg.data.test_samples, stream::TEST_DATA)
    } else {
        (cfg.data.samples, stream::DATA)
    };
    let seed = seeded_rng(cfg.train.seed, s).next_u64();
    let size = cfg.data.size;
    let prefix = if held_out { "test" } else { "train" };
    Ok(synth_dataset(n, size, size, seed, cfg.data.difficulty)?
        .into_iter()
        .enumerate()
        .map(|(i, s)| (format!("{prefix}_{i:04}"), s))
        .collect())
}

pub struct TrainOutcome {
    pub log: TrainLog,
    pub model: TmUnet,
    pub store: ParamStore<f32>,
    /// Every checkpoint written, final one last.
    pub checkpoints: Vec<PathBuf>,
}

/// Trains from a fresh initialization and writes the resolved config, the
/// epoch log and checkpoints under `cfg.out`.
pub fn train_run(
    cfg: &RunConfig,
    mut progress: impl FnMut(&crate::train::EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out)?;
    std::fs::write(cfg.out.join(CONFIG_FILE), cfg.to_text())?;
    let data: Vec<SegmentationSample<f32>> = load_split(cfg, false)?
        .into_iter()
        .map(|(_, s)| s)
        .collect();
    let mut store = ParamStore::new();
    let model = TmUnet::new(
        &mut store,
        &cfg.model,
        &mut seeded_rng(cfg.train.seed, stream::INIT),
    )?;
    let mut checkpoints = Vec::new();
    let log = train(
        &model,
        &mut store,
        &data,
        &cfg.train,
        cfg.loss,
        |rec, store| {
            progress(rec);
            let every = cfg.checkpoint_every;
            if every > 0 && (rec.epoch + 1) % every == 0 {
                let path = cfg.out.join(epoch_checkpoint_name(rec.epoch + 1));
                checkpoint::save(&path, &cfg.model, store)?;
                checkpoints.push(path);
            }
            Ok(())
        },
    )?;
    std::fs::write(cfg.out.join(LOG_FILE), log.to_csv())?;
    let path = cfg.out.join(FINAL_CHECKPOINT);
    checkpoint::save(&path, &cfg.model, &store)?;
    checkpoints.push(path);
    Ok(TrainOutcome {
        log,
        model,
        store,
        checkpoints,
    })
}

/// Foreground probabilities `[B, 1, H, W]` for a list of images.
pub fn probabilities(
    model: &TmUnet,
    store: &mut ParamStore<f32>,
    samples: &[&SegmentationSample<f32>],
    batch: usize,
) -> Result<Vec<Tensor<f32>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let (x, _) = collate(chunk)?;
        let z = predict(model, store, x)?;
        let p = z.map(|v| 1.0 / (1.0 + (-v).exp()));
        let (h, w) = (p.shape()[2], p.shape()[3]);
        out.extend(
            p.split(0, &vec![1; chunk.len()])?
                .into_iter()
                .map(|t| t.reshape(&[1, h, w]))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    Ok(out)
}

/// Scores a model on `samples`, writing per-image P5 masks to `mask_dir`
/// when given.
pub fn evaluate(
    model: &TmUnet,
    store: &mut ParamStore<f32>,
    samples: &[Named<f32>],
    cfg: &RunConfig,
    mask_dir: Option<&Path>,
) -> Result<MetricsReport> {
    let refs: Vec<&SegmentationSample<f32>> = samples.iter().map(|(_, s)| s).collect();
    let probs = probabilities(model, store, &refs, cfg.train.batch_size)?;
    if let Some(dir) = mask_dir {
        std::fs::create_dir_all(dir)?;
    }
    let thr = cfg.metrics.threshold as f32;
    let mut report = MetricsReport::default();
    for ((name, sample), p) in samples.iter().zip(&probs) {
        let pred = Mask::from_threshold(p, thr)?;
        let truth = Mask::from_threshold(&sample.mask, 0.5)?;
        if let Some(dir) = mask_dir {
            let binary = p.map(|v| if v > thr { 1.0 } else { 0.0 });
            save_mask(&dir.join(format!("{name}.pgm")), &binary)?;
        }
        report.images.push(score_pair(
            name.clone(),
            MaskPair::new(&pred, &truth)?,
            cfg.metrics.hd_percentile,
        )?);
    }
    Ok(report)
}

/// Loads `checkpoint`, evaluates it on the held-out split and writes the
/// metrics CSV and masks under `cfg.out`.
pub fn eval_run(cfg: &RunConfig, checkpoint: &Path) -> Result<MetricsReport> {
    cfg.validate()?;
    let ck: Checkpoint<f32> = checkpoint::load(checkpoint)?;
    if ck.model.channels.input_channels != 3 || ck.model.channels.num_classes != 1 {
        return Err(Error::Config {
            key: "model".into(),
            msg: "evaluation expects an RGB, single-class checkpoint".into(),
        });
    }
    let (model, mut store) = ck.restore()?;
    let samples = load_split(cfg, true)?;
    std::fs::create_dir_all(&cfg.out)?;
    let report = evaluate(
        &model,
        &mut store,
        &samples,
        cfg,
        Some(&cfg.out.join(MASK_DIR)),
    )?;
    std::fs::write(cfg.out.join(METRICS_FILE), report.to_csv())?;
    Ok(report)
}
