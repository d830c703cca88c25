//! Training loop: deterministic batching, Adam updates under a milestone
//! learning-rate schedule, periodic validation in inference mode, best-EPE
//! checkpointing and a CSV metric log.

pub mod adam;
pub mod sweep;

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::save_model;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::io::{load_sample, manifest::ManifestEntry, StereoSample};
use crate::loss::{total_loss, DisparityMap, GtBatch, MetricAccumulator};
use crate::model::StereoModel;
use crate::nn::RunMode;
use crate::params::{Leaves, ParamStore, SlotKind};
use crate::tensor::{Scalar, Tape};

pub use adam::{lr_at, Adam};

/// Loaded dataset with uniform extents, plus how many manifest entries
/// were dropped for having under 10% valid pixels.
pub struct Dataset {
    pub samples: Vec<StereoSample>,
    pub skipped: usize,
}

pub fn load_dataset(entries: &[ManifestEntry], d_max: usize) -> Result<Dataset> {
    let mut samples = Vec::new();
    let mut skipped = 0usize;
    for entry in entries {
        let (sample, passes) = load_sample(entry, d_max)?;
        if passes {
            samples.push(sample);
        } else {
            skipped += 1;
        }
    }
    Ok(Dataset { samples, skipped })
}

/// Deterministic split: the last 10% of samples (at least one) validate.
pub fn split_train_val(samples: Vec<StereoSample>) -> (Vec<StereoSample>, Vec<StereoSample>) {
    let n = samples.len();
    let val = (n / 10).max(1).min(n.saturating_sub(1));
    let mut train = samples;
    let val_set = train.split_off(n - val);
    (train, val_set)
}

/// Epoch-shuffled index stream; batches may span epoch boundaries.
struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    epoch: u64,
    seed: u64,
}

impl BatchSampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut s = BatchSampler {
            order: (0..n).collect(),
            pos: 0,
            epoch: 0,
            seed,
        };
        s.shuffle();
        s
    }

    fn shuffle(&mut self) {
        use rand::Rng;
        let mut rng =
            ChaCha8Rng::seed_from_u64(self.seed ^ self.epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        for i in (1..self.order.len()).rev() {
            let j = rng.random_range(0..=i);
            self.order.swap(i, j);
        }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut batch = Vec::with_capacity(size);
        while batch.len() < size {
            if self.pos == self.order.len() {
                self.pos = 0;
                self.epoch += 1;
                self.shuffle();
            }
            batch.push(self.order[self.pos]);
            self.pos += 1;
        }
        batch
    }
}

fn batch_tensor<S: Scalar>(
    tape: &mut Tape<S>,
    samples: &[&StereoSample],
    left: bool,
    mean: f64,
    std: f64,
) -> Result<crate::tensor::TensorId> {
    let (h, w) = (samples[0].left.height, samples[0].left.width);
    let mut data = Vec::with_capacity(samples.len() * 3 * h * w);
    for s in samples {
        let buf = if left { &s.left } else { &s.right };
        if buf.height != h || buf.width != w {
            return Err(Error::invalid(
                "training batches need uniform image extents",
            ));
        }
        data.extend(buf.to_chw::<S>(mean, std));
    }
    tape.leaf(&[samples.len(), 3, h, w], data, false)
}

/// Runs the final-head forward on one sample and extracts the disparity map.
pub fn infer_disparity<S: Scalar>(
    model: &StereoModel,
    ps: &mut ParamStore<S>,
    sample: &StereoSample,
) -> Result<DisparityMap> {
    let mut tape = Tape::<S>::new();
    let mut lv = Leaves::new(ps, false);
    let left = batch_tensor(&mut tape, &[sample], true, model.cfg.norm_mean, model.cfg.norm_std)?;
    let right = batch_tensor(&mut tape, &[sample], false, model.cfg.norm_mean, model.cfg.norm_std)?;
    let pred = model.forward_infer(&mut tape, ps, &mut lv, left, right)?;
    let values: Vec<f32> = tape
        .value(pred)
        .iter()
        .map(|v| v.to_f64().unwrap_or(f64::NAN) as f32)
        .collect();
    Ok(DisparityMap::dense(
        sample.left.height,
        sample.left.width,
        values,
    ))
}

/// Validation metrics (EPE, D1) over a sample set in inference mode.
pub fn validate<S: Scalar>(
    model: &StereoModel,
    ps: &mut ParamStore<S>,
    samples: &[StereoSample],
) -> Result<(f64, f64)> {
    let mut acc = MetricAccumulator::new();
    for s in samples {
        let pred = infer_disparity(model, ps, s)?;
        acc.add(&pred, &s.gt)?;
    }
    let report = acc.report()?;
    Ok((report.epe, report.d1_all))
}

#[derive(Clone, Debug)]
pub struct LogRow {
    pub iteration: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_epe: f64,
    pub val_d1: f64,
}

pub const LOG_CSV_HEADER: &str = "iteration,lr,train_loss,val_epe,val_d1";

#[derive(Debug)]
pub struct TrainOutcome {
    pub iterations_run: usize,
    pub best_val_epe: f64,
    pub best_iteration: usize,
    pub early_stopped: bool,
    pub log: Vec<LogRow>,
    pub checkpoint: Option<PathBuf>,
    pub trainable_params: usize,
}

/// Trains a fresh model. When `out_dir` is given, writes `best.ckpt` on
/// every validation improvement and `log.csv` at the end.
pub fn train<S: Scalar>(
    cfg: &RunConfig,
    train_set: &[StereoSample],
    val_set: &[StereoSample],
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::invalid("training needs nonempty train and val sets"));
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }
    let mut ps = ParamStore::<S>::new();
    let model = StereoModel::new(cfg.net.clone(), &mut ps, cfg.train.seed)?;
    let mut adam = Adam::new(&ps, &cfg.train);
    let mut sampler = BatchSampler::new(train_set.len(), cfg.train.seed);

    let ckpt_path = out_dir.map(|d| d.join("best.ckpt"));
    let mut best_epe = f64::INFINITY;
    let mut best_iter = 0usize;
    let mut saved = false;
    let mut log = Vec::new();
    let mut loss_accum = 0.0f64;
    let mut loss_n = 0usize;
    let mut early_stopped = false;
    let mut iterations_run = 0usize;

    for t in 0..cfg.train.max_iters {
        let batch_idx = sampler.next_batch(cfg.train.batch_size);
        let batch: Vec<&StereoSample> = batch_idx.iter().map(|&i| &train_set[i]).collect();

        let mut tape = Tape::<S>::new();
        let mut lv = Leaves::new(&ps, true);
        let left = batch_tensor(&mut tape, &batch, true, cfg.net.norm_mean, cfg.net.norm_std)?;
        let right = batch_tensor(&mut tape, &batch, false, cfg.net.norm_mean, cfg.net.norm_std)?;
        let preds = model.forward_train(&mut tape, &mut ps, &mut lv, left, right, RunMode::train())?;
        let gt_maps: Vec<&DisparityMap> = batch.iter().map(|s| &s.gt).collect();
        let gt = GtBatch::<S>::from_maps(&gt_maps)?;
        let loss = total_loss(&mut tape, &preds, &gt, &cfg.train.lambdas)?;
        let loss_val = tape.value(loss)[0].to_f64().unwrap_or(f64::NAN);
        if !loss_val.is_finite() {
            let hint = match (&ckpt_path, saved) {
                (Some(p), true) => format!("last good checkpoint: {}", p.display()),
                _ => "no checkpoint saved yet".to_string(),
            };
            return Err(Error::Train(format!(
                "non-finite loss {loss_val} at iteration {t}; {hint}"
            )));
        }
        loss_accum += loss_val;
        loss_n += 1;
        tape.backward(loss)?;

        let lr = lr_at(cfg.train.lr, cfg.train.lr_decay_factor, &cfg.train.lr_milestones, t);
        let used = lv.used();
        let mut grads: Vec<(crate::params::ParamId, &[S])> = Vec::with_capacity(used.len());
        for (pid, tid) in &used {
            if ps.slot(*pid).kind == SlotKind::Trainable {
                if let Some(g) = tape.grad(*tid) {
                    grads.push((*pid, g));
                }
            }
        }
        adam.step(&mut ps, &grads, lr)?;
        iterations_run = t + 1;

        let at_interval = (t + 1) % cfg.train.val_interval == 0;
        if at_interval || t + 1 == cfg.train.max_iters {
            let (val_epe, val_d1) = validate(&model, &mut ps, val_set)?;
            log.push(LogRow {
                iteration: t + 1,
                lr,
                train_loss: loss_accum / loss_n.max(1) as f64,
                val_epe,
                val_d1,
            });
            loss_accum = 0.0;
            loss_n = 0;
            if val_epe < best_epe {
                best_epe = val_epe;
                best_iter = t + 1;
                if let Some(p) = &ckpt_path {
                    save_model(p, &ps, &cfg.net)?;
                    saved = true;
                }
            }
            if let Some(target) = cfg.train.early_stop_epe {
                if val_epe < target {
                    early_stopped = true;
                    break;
                }
            }
        }
    }

    if let Some(dir) = out_dir {
        let mut text = String::from(LOG_CSV_HEADER);
        text.push('\n');
        for r in &log {
            text.push_str(&format!(
                "{},{:.8},{:.6},{:.4},{:.2}\n",
                r.iteration, r.lr, r.train_loss, r.val_epe, r.val_d1
            ));
        }
        fs::write(dir.join("log.csv"), text)?;
    }

    Ok(TrainOutcome {
        iterations_run,
        best_val_epe: best_epe,
        best_iteration: best_iter,
        early_stopped,
        log,
        checkpoint: if saved { ckpt_path } else { None },
        trainable_params: ps.trainable_numel(),
    })
}
