//! Losses, optimizer, learning-rate schedule and the epoch loop.

mod loss;
mod optim;

pub use loss::{
    circle_anchor, circle_loss, identity_loss, CircleOutput, CircleParams, CIRCLE_GAMMA,
    CIRCLE_MARGIN,
};
pub use optim::{cosine_lr, Adam, BASE_LR};

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{augment, uniform_subsample, AugmentConfig, PointCloud};
use crate::model::{batch_input, OgNet};
use crate::tensor::{Mode, Tape};

pub const BATCH_SIZE: usize = 36;
pub const TRAIN_FRACTION: f64 = 0.5;
pub const METRICS_FILE: &str = "metrics.tsv";
pub const BEST_CHECKPOINT: &str = "best.ogck";
pub const LAST_CHECKPOINT: &str = "last.ogck";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Ce,
    CeCircle,
}

impl FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" => Ok(LossKind::Ce),
            "ce+circle" => Ok(LossKind::CeCircle),
            other => Err(Error::Config(format!("unknown loss {other:?}"))),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Ce => "ce",
            LossKind::CeCircle => "ce+circle",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch: usize,
    pub epochs: usize,
    pub base_lr: f64,
    pub loss: LossKind,
    pub circle: CircleParams,
    /// Weight of the circle term relative to cross-entropy.
    pub circle_weight: f64,
    pub augment: AugmentConfig,
    /// Share of each cloud's points kept per training sample.
    pub fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch: BATCH_SIZE,
            epochs: 1000,
            base_lr: BASE_LR,
            loss: LossKind::Ce,
            circle: CircleParams::default(),
            circle_weight: 1.0,
            augment: AugmentConfig::default(),
            fraction: TRAIN_FRACTION,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch < 2 {
            return Err(Error::Config(format!("batch {} < 2", self.batch)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("bad learning rate {}", self.base_lr)));
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::Config(format!("fraction {} outside (0, 1]", self.fraction)));
        }
        if !(self.circle.gamma > 0.0 && self.circle_weight >= 0.0) {
            return Err(Error::Config("circle gamma and weight must be positive".into()));
        }
        self.augment.validate().map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies one `key=value` setting. Returns `false` for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("bad value {v:?} for {key}")))
        }
        match key {
            "batch" => self.batch = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "lr" => self.base_lr = num(key, value)?,
            "loss" => self.loss = value.parse()?,
            "circle_gamma" => self.circle.gamma = num(key, value)?,
            "circle_margin" => self.circle.margin = num(key, value)?,
            "circle_weight" => self.circle_weight = num(key, value)?,
            "scale_min" => self.augment.scale_range.0 = num(key, value)?,
            "scale_max" => self.augment.scale_range.1 = num(key, value)?,
            "jitter_sigma" => self.augment.jitter_sigma = num(key, value)?,
            "jitter_clip" => self.augment.jitter_clip = num(key, value)?,
            "fraction" => self.fraction = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_text(&self) -> String {
        format!(
            "batch={}\nepochs={}\nlr={}\nloss={}\ncircle_gamma={}\ncircle_margin={}\n\
             circle_weight={}\nscale_min={}\nscale_max={}\njitter_sigma={}\njitter_clip={}\n\
             fraction={}\nseed={}\n",
            self.batch,
            self.epochs,
            self.base_lr,
            self.loss,
            self.circle.gamma,
            self.circle.margin,
            self.circle_weight,
            self.augment.scale_range.0,
            self.augment.scale_range.1,
            self.augment.jitter_sigma,
            self.augment.jitter_clip,
            self.fraction,
            self.seed,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Learning rate at the epoch's first step.
    pub lr: f64,
    /// Mean total loss over the epoch's batches.
    pub loss: f64,
    /// Train-mode batch accuracy (dropout active).
    pub acc: f64,
    /// Mean circle term, when it is part of the objective.
    pub circle: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub steps: usize,
    /// Batches whose circle term had no valid anchor.
    pub circle_warnings: usize,
}

/// Prepares one training sample: subsample then augment.
fn prepare(cloud: &PointCloud, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<PointCloud> {
    let sub = uniform_subsample(cloud, cfg.fraction, rng.random())?;
    augment(&sub, &cfg.augment, rng)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Trains `net` in place. With `out_dir`, writes the metrics log and the
/// best (lowest epoch loss) and last checkpoints there.
pub fn train(
    net: &mut OgNet,
    clouds: &[PointCloud],
    labels: &[usize],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if clouds.len() != labels.len() || clouds.len() < 2 {
        return Err(Error::Shape(format!(
            "{} clouds with {} labels; need at least 2 samples",
            clouds.len(),
            labels.len()
        )));
    }
    let classes = net.config().num_classes;
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Label {
            label: bad,
            classes,
        });
    }
    let mut metrics = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(BufWriter::new(File::create(dir.join(METRICS_FILE))?))
        }
        None => None,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(net.params().tensors());
    let n = clouds.len();
    let full = n / cfg.batch;
    let batches_per_epoch = full + usize::from(n % cfg.batch >= 2);
    let total_steps = batches_per_epoch * cfg.epochs;
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0;
    let mut report = TrainReport {
        epochs: Vec::with_capacity(cfg.epochs),
        best_epoch: 0,
        steps: 0,
        circle_warnings: 0,
    };
    let mut best_loss = f64::INFINITY;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let epoch_lr = cosine_lr(step, total_steps, cfg.base_lr);
        let (mut loss_sum, mut circle_sum, mut batches) = (0.0, 0.0, 0usize);
        let (mut correct, mut seen) = (0usize, 0usize);
        for chunk in order.chunks(cfg.batch).filter(|c| c.len() >= 2) {
            let samples = chunk
                .iter()
                .map(|&i| prepare(&clouds[i], cfg, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&PointCloud> = samples.iter().collect();
            let input = batch_input(&refs)?;
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();

            let mut tape = Tape::new();
            let out = net.forward(&mut tape, &input, Mode::Train, &mut rng)?;
            let ce = identity_loss(&mut tape, out.logits, &batch_labels)?;
            let loss = match cfg.loss {
                LossKind::Ce => ce,
                LossKind::CeCircle => {
                    let c = circle_loss(&mut tape, out.embedding, &batch_labels, cfg.circle)?;
                    if c.no_pairs {
                        report.circle_warnings += 1;
                        log::warn!("epoch {epoch}: batch without circle-loss pairs");
                    }
                    circle_sum += tape.scalar(c.loss);
                    let weighted = tape.scale(c.loss, cfg.circle_weight);
                    tape.add(ce, weighted)?
                }
            };
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step,
                    msg: format!("loss is {value}"),
                });
            }
            let logits = tape.data(out.logits);
            for (row, &y) in logits.chunks_exact(classes).zip(&batch_labels) {
                correct += usize::from(argmax(row) == y);
            }
            seen += batch_labels.len();

            let diverged = |e: Error| Error::Divergence {
                epoch,
                step,
                msg: e.to_string(),
            };
            tape.backward(loss).map_err(diverged)?;
            let lr = cosine_lr(step, total_steps, cfg.base_lr);
            let store = net.params_mut();
            store.zero_grads();
            store.collect_grads(&tape, &out.param_vars)?;
            adam.step(store.tensors_mut(), lr).map_err(diverged)?;
            store.apply_bn_updates(&out.bn_updates);
            store.zero_grads();

            loss_sum += value;
            batches += 1;
            step += 1;
        }
        let stats = EpochStats {
            epoch,
            lr: epoch_lr,
            loss: loss_sum / batches as f64,
            acc: correct as f64 / seen as f64,
            circle: (cfg.loss == LossKind::CeCircle).then(|| circle_sum / batches as f64),
        };
        log::info!(
            "epoch {epoch} lr {:.3e} loss {:.4} acc {:.3}",
            stats.lr,
            stats.loss,
            stats.acc
        );
        if let (Some(w), Some(dir)) = (metrics.as_mut(), out_dir) {
            writeln!(w, "{}\t{}\t{}\t{}", stats.epoch, stats.lr, stats.loss, stats.acc)?;
            w.flush()?;
            if stats.loss < best_loss {
                net.save(&dir.join(BEST_CHECKPOINT))?;
            }
        }
        if stats.loss < best_loss {
            best_loss = stats.loss;
            report.best_epoch = epoch;
        }
        report.epochs.push(stats);
    }
    if let Some(dir) = out_dir {
        net.save(&dir.join(LAST_CHECKPOINT))?;
    }
    report.steps = step;
    Ok(report)
}

/// Eval-mode classification accuracy on `fraction`-subsampled clouds.
pub fn accuracy(
    net: &OgNet,
    clouds: &[PointCloud],
    labels: &[usize],
    fraction: f64,
    seed: u64,
    batch: usize,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut correct = 0;
    let classes = net.config().num_classes;
    for (chunk, chunk_labels) in clouds.chunks(batch.max(1)).zip(labels.chunks(batch.max(1))) {
        let samples = chunk
            .iter()
            .map(|c| uniform_subsample(c, fraction, rng.random()))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&PointCloud> = samples.iter().collect();
        let logits = net.predict(&batch_input(&refs)?)?;
        for (row, &y) in logits.data().chunks_exact(classes).zip(chunk_labels) {
            correct += usize::from(argmax(row) == y);
        }
    }
    Ok(correct as f64 / clouds.len().max(1) as f64)
}
