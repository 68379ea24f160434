use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::data::Dataset;
use super::optim::{AdamW, WarmupCosine};
use crate::attention::AttentionMode;
use crate::backbone::{save_checkpoint, Model, ModelParams};
use crate::error::{shape, Error, Result};
use crate::nn::FeatureMap;
use crate::params::ParamSet;
use crate::scalar::Real;

pub const LOG_FILE: &str = "log.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoint";

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Learning rate at the epoch's first step.
    pub lr: f64,
    /// Mean per-sample loss over the epoch's steps, summed in dataset order.
    pub train_loss: f64,
    pub val_top1: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutput<T> {
    pub model: Model<T>,
    pub log: Vec<EpochRecord>,
}

#[derive(Clone, Copy, Debug)]
struct Augment {
    shift: (isize, isize),
    flip: bool,
}

fn augment<T: Real>(image: &FeatureMap<T>, a: Augment) -> FeatureMap<T> {
    if a.shift == (0, 0) && !a.flip {
        return image.clone();
    }
    let (h, w) = (image.height as isize, image.width as isize);
    let mut out = FeatureMap {
        data: ndarray::Array2::zeros(image.data.raw_dim()),
        height: image.height,
        width: image.width,
    };
    for y in 0..h {
        for x in 0..w {
            let sx = if a.flip { w - 1 - x } else { x } + a.shift.1;
            let sy = y + a.shift.0;
            if (0..h).contains(&sy) && (0..w).contains(&sx) {
                let src = image.data.row((sy * w + sx) as usize);
                out.data.row_mut((y * w + x) as usize).assign(&src);
            }
        }
    }
    out
}

/// Index of the largest logit; the first wins ties.
fn argmax<T: Real>(logits: &ndarray::Array1<T>) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Fraction of images whose argmax logit equals the label.
pub fn evaluate_top1<T: Real>(model: &Model<T>, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let hits = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let image = cast_image::<T>(&data.image(i));
            model.logits_sample(&image).map(|l| usize::from(argmax(&l) == data.label(i)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / data.len() as f64)
}

fn cast_image<T: Real>(image: &FeatureMap<f32>) -> FeatureMap<T> {
    FeatureMap {
        data: image.data.mapv(|v| T::of(f64::from(v))),
        height: image.height,
        width: image.width,
    }
}

/// Trains `model` in place of a copy and returns it with the per-epoch log.
///
/// With `out_dir`, each epoch appends one JSON line to `log.jsonl` and
/// rewrites `checkpoint/`. Results depend only on the inputs: samples of a
/// batch are differentiated in parallel and their gradients summed in batch
/// order.
pub fn train<T: Real>(
    model: Model<T>,
    train_set: &Dataset,
    val_set: &Dataset,
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutput<T>> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Dataset("empty training set".into()));
    }
    if train_set.class_count() != model.spec.class_count {
        return Err(shape(format!(
            "dataset has {} classes, model {}",
            train_set.class_count(),
            model.spec.class_count
        )));
    }
    let mut log_file = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(BufWriter::new(File::create(dir.join(LOG_FILE))?))
        }
        None => None,
    };

    let mut model = model;
    let steps_per_epoch = train_set.len().div_ceil(config.batch_size);
    let schedule = WarmupCosine {
        base: config.lr,
        warmup: config.warmup_epochs * steps_per_epoch,
        total: config.total_epochs * steps_per_epoch,
    };
    let mut opt = AdamW::new(&model.params, config.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let max_shift = (train_set.side() / 8) as i64;
    let mut log = Vec::with_capacity(config.total_epochs);
    let mut step = 0;

    for epoch in 1..=config.total_epochs {
        order.shuffle(&mut rng);
        let augments: Vec<Augment> = order
            .iter()
            .map(|_| Augment {
                shift: if config.random_crop {
                    (
                        rng.random_range(-max_shift..=max_shift) as isize,
                        rng.random_range(-max_shift..=max_shift) as isize,
                    )
                } else {
                    (0, 0)
                },
                flip: config.horizontal_flip && rng.random_bool(0.5),
            })
            .collect();
        let epoch_lr = schedule.lr(step);
        let mut sample_loss = vec![0.0f64; train_set.len()];
        for (batch, aug) in order.chunks(config.batch_size).zip(augments.chunks(config.batch_size)) {
            let lr = schedule.lr(step);
            let current = &model;
            let results = batch
                .par_iter()
                .zip(aug)
                .map(|(&i, &a)| {
                    let image = augment(&cast_image::<T>(&train_set.image(i)), a);
                    current.loss_and_grad_sample(&image, train_set.label(i))
                })
                .collect::<Result<Vec<(T, ModelParams<T>)>>>()?;
            let mut results = batch.iter().zip(results);
            let (&first, (first_loss, mut grad)) = results.next().expect("non-empty batch");
            sample_loss[first] = first_loss.as_f64();
            let mut batch_loss = sample_loss[first];
            for (&i, (l, g)) in results {
                sample_loss[i] = l.as_f64();
                batch_loss += sample_loss[i];
                grad.accumulate(&g);
            }
            if !batch_loss.is_finite() {
                return Err(Error::Diverged { epoch, step, loss: batch_loss });
            }
            grad.scale(T::of(1.0 / batch.len() as f64));
            if lr > 0.0 {
                opt.update(&mut model.params, &grad, lr);
            }
            step += 1;
        }
        let record = EpochRecord {
            epoch,
            lr: epoch_lr,
            train_loss: sample_loss.iter().sum::<f64>() / train_set.len() as f64,
            val_top1: evaluate_top1(&model, val_set)?,
        };
        if let (Some(f), Some(dir)) = (log_file.as_mut(), out_dir) {
            writeln!(f, "{}", serde_json::to_string(&record)?)?;
            f.flush()?;
            save_checkpoint(&model, dir.join(CHECKPOINT_DIR))?;
        }
        log.push(record);
    }
    Ok(TrainOutput { model, log })
}

/// Plain-text comparison of several runs' final epochs.
pub fn ablation_table(runs: &[(AttentionMode, Vec<EpochRecord>)]) -> String {
    let mut out = format!("{:<12} {:>6} {:>12} {:>12} {:>9}\n", "mode", "epochs", "first_loss", "final_loss", "val_top1");
    for (mode, log) in runs {
        if let (Some(first), Some(last)) = (log.first(), log.last()) {
            out.push_str(&format!(
                "{:<12} {:>6} {:>12.4} {:>12.4} {:>9.4}\n",
                mode.name(),
                log.len(),
                first.train_loss,
                last.train_loss,
                last.val_top1
            ));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flip_and_shift() {
        let data = ndarray::Array2::from_shape_vec((4, 1), vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let img = FeatureMap { data, height: 2, width: 2 };
        let f = augment(&img, Augment { shift: (0, 0), flip: true });
        assert_eq!(f.data.as_slice().unwrap(), &[2.0, 1.0, 4.0, 3.0]);
        let s = augment(&img, Augment { shift: (1, 0), flip: false });
        assert_eq!(s.data.as_slice().unwrap(), &[3.0, 4.0, 0.0, 0.0]);
    }

    #[test]
    fn argmax_prefers_first() {
        assert_eq!(argmax(&ndarray::arr1(&[1.0f32, 3.0, 3.0])), 1);
    }
}
