//! Training loop: stratified split, per-epoch augmentation, gradient
//! accumulation and best-validation checkpoint selection.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{sample_eps, LossTerms, VaeConfig, VaeParams};
use crate::augment::{random_similarity, AugmentRanges};
use crate::error::{Error, Result};
use crate::nn::{sgd_step, Gradients, SgdSchedule};
use crate::seed;
use crate::volume::{dice, volume_mm3, MaskVolume};

pub const MIN_COHORT: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    /// Micro-batches accumulated per optimizer step.
    pub accum_steps: usize,
    /// Learning-rate schedule; `total_steps` is derived from the epoch count.
    pub sgd: SgdSchedule,
    pub augment: bool,
    pub aug: AugmentRanges,
    pub val_fraction: f64,
    /// Rescales the accumulated gradient to at most this global L2 norm.
    pub grad_clip_norm: Option<f64>,
    pub seed: u64,
    /// Print one line per epoch to stderr.
    pub log: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 8,
            accum_steps: 5,
            sgd: SgdSchedule {
                lr0: 1e-3,
                ..SgdSchedule::default()
            },
            augment: true,
            aug: AugmentRanges::default(),
            val_fraction: 0.2,
            grad_clip_norm: Some(100.0),
            seed: 0,
            log: false,
        }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.accum_steps == 0 {
            return Err(Error::InvalidParameter(
                "epochs, batch_size and accum_steps must be positive".into(),
            ));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "val_fraction must lie in (0, 1), got {}",
                self.val_fraction
            )));
        }
        if let Some(c) = self.grad_clip_norm {
            if !(c > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "grad_clip_norm must be positive, got {c}"
                )));
            }
        }
        self.aug.validate()
    }

    /// Samples per optimizer step.
    pub fn step_size(&self) -> usize {
        self.batch_size * self.accum_steps
    }

    pub fn steps_per_epoch(&self, n_train: usize) -> usize {
        n_train.div_ceil(self.step_size())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-sample training loss at the epoch's KL weights.
    pub train_loss: f64,
    /// Mean per-sample validation loss at `z = mu` and full KL weight.
    pub val_loss: f64,
    pub val_dice: f64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingHistory {
    pub records: Vec<EpochRecord>,
    /// Epoch whose parameters were returned.
    pub best_epoch: usize,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
}

impl TrainingHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,val_dice,lr\n");
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{:.6},{:.6},{:.6},{:.6e}",
                r.epoch, r.train_loss, r.val_loss, r.val_dice, r.lr
            );
        }
        s
    }

    /// Mean training loss over the last `window` epochs.
    pub fn smoothed_train_loss(&self, window: usize) -> Option<f64> {
        let n = self.records.len();
        if n == 0 || window == 0 {
            return None;
        }
        let tail = &self.records[n.saturating_sub(window)..];
        Some(tail.iter().map(|r| r.train_loss).sum::<f64>() / tail.len() as f64)
    }
}

/// Rank-based volume quartile (0..4) of each entry; ties broken by index.
pub fn volume_quartiles(volumes: &[f64]) -> Vec<usize> {
    let n = volumes.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| volumes[a].total_cmp(&volumes[b]).then(a.cmp(&b)));
    let mut q = vec![0; n];
    for (rank, &i) in order.iter().enumerate() {
        q[i] = rank * 4 / n;
    }
    q
}

/// Splits indices into `(train, validation)` with `round(val_fraction * n)`
/// validation samples spread as evenly as possible over the four volume
/// quartiles, so validation counts per quartile differ by at most one.
pub fn split_by_volume_quartile(
    volumes: &[f64],
    val_fraction: f64,
    split_seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let n = volumes.len();
    if n < MIN_COHORT {
        return Err(Error::TooFewSamples {
            needed: MIN_COHORT,
            got: n,
        });
    }
    let n_val = ((val_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let quart = volume_quartiles(volumes);
    let mut rng = seed::rng(split_seed);
    let mut train = Vec::with_capacity(n - n_val);
    let mut val = Vec::with_capacity(n_val);
    for q in 0..4 {
        let mut members: Vec<usize> = (0..n).filter(|&i| quart[i] == q).collect();
        members.shuffle(&mut rng);
        let take = (n_val / 4 + usize::from(q < n_val % 4)).min(members.len());
        val.extend_from_slice(&members[..take]);
        train.extend_from_slice(&members[take..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

/// Splits `cohort` 80/20 by volume quartile and trains on it.
pub fn train(
    cohort: &[MaskVolume],
    config: VaeConfig,
    opts: &TrainOptions,
) -> Result<(VaeParams<f32>, TrainingHistory)> {
    let volumes: Vec<f64> = cohort.iter().map(volume_mm3).collect();
    let (ti, vi) = split_by_volume_quartile(&volumes, opts.val_fraction, seed::derive(opts.seed, 1))?;
    let train_set: Vec<MaskVolume> = ti.iter().map(|&i| cohort[i].clone()).collect();
    let val_set: Vec<MaskVolume> = vi.iter().map(|&i| cohort[i].clone()).collect();
    let (params, mut history) = train_with_validation(&train_set, &val_set, config, opts)?;
    history.train_indices = ti;
    history.val_indices = vi;
    Ok((params, history))
}

fn evaluate_set(params: &VaeParams<f32>, set: &[MaskVolume]) -> Result<(f64, f64)> {
    let results = set
        .par_iter()
        .map(|m| {
            let (terms, recon) = params.evaluate(m)?;
            Ok((terms.total, dice(m, &recon)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = results.len() as f64;
    Ok((
        results.iter().map(|r| r.0).sum::<f64>() / n,
        results.iter().map(|r| r.1).sum::<f64>() / n,
    ))
}

fn grad_norm(g: &Gradients<f32>, params: &VaeParams<f32>) -> f64 {
    params
        .params()
        .ids()
        .filter_map(|id| g.get(id))
        .flat_map(|t| t.data().iter())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt()
}

/// Trains on `train_set`, selecting the epoch with the lowest validation
/// loss on `val_set`.
pub fn train_with_validation(
    train_set: &[MaskVolume],
    val_set: &[MaskVolume],
    mut config: VaeConfig,
    opts: &TrainOptions,
) -> Result<(VaeParams<f32>, TrainingHistory)> {
    opts.validate()?;
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::EmptyCohort);
    }
    for m in train_set.iter().chain(val_set) {
        if m.dims() != config.input_dims {
            return Err(Error::DimMismatch(m.dims(), config.input_dims));
        }
    }
    let steps_per_epoch = opts.steps_per_epoch(train_set.len());
    let sched = SgdSchedule {
        total_steps: opts.epochs * steps_per_epoch,
        ..opts.sgd
    };
    sched.validate()?;
    config.kl_warmup_steps = config.kl_warmup_steps.min(sched.total_steps);
    let mut params = VaeParams::<f32>::init(config.clone(), seed::derive(opts.seed, 2))?;
    let mut best = (f64::INFINITY, params.clone(), 0usize);
    let mut history = TrainingHistory::default();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut shuffle_rng = seed::rng(seed::derive(opts.seed, 3));
    let sample_seed = seed::derive(opts.seed, 4);
    let mut step = 0usize;

    for epoch in 0..opts.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for group in order.chunks(opts.step_size()) {
            let kl_weight = config.kl_weight(step);
            let current = &params;
            let results: Vec<(LossTerms, Gradients<f32>)> = group
                .par_iter()
                .map(|&i| {
                    let s = seed::derive(sample_seed, (epoch * train_set.len() + i) as u64);
                    let x = if opts.augment {
                        random_similarity(&train_set[i], &opts.aug, seed::derive(s, 0))?
                    } else {
                        train_set[i].clone()
                    };
                    let eps: Vec<f32> = sample_eps(config.latent_dim, seed::derive(s, 1))
                        .into_iter()
                        .map(|v| v as f32)
                        .collect();
                    current.loss_and_gradients(&x, &eps, kl_weight)
                })
                .collect::<Result<_>>()?;
            let mut total = results[0].1.clone();
            for (_, g) in &results[1..] {
                total.merge(g);
            }
            for (k, (terms, _)) in results.iter().enumerate() {
                if !terms.total.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        step,
                        detail: format!(
                            "sample {} nll={} kl={} kl_weight={kl_weight} lr={lr} grad_norm={}",
                            group[k],
                            terms.nll,
                            terms.kl,
                            grad_norm(&results[k].1, &params)
                        ),
                    });
                }
                loss_sum += terms.total;
            }
            let mut scale = 1.0 / group.len() as f64;
            if let Some(clip) = opts.grad_clip_norm {
                let norm = grad_norm(&total, &params) * scale;
                if norm > clip {
                    scale *= clip / norm;
                }
            }
            params.params_mut().accumulate(&total, scale as f32);
            lr = sgd_step(params.params_mut(), &sched, step)?;
            step += 1;
        }
        let (val_loss, val_dice) = evaluate_set(&params, val_set)?;
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            val_loss,
            val_dice,
            lr,
        };
        if opts.log {
            eprintln!(
                "epoch {:>4}  train {:>10.3}  val {:>10.3}  dice {:.4}  lr {:.3e}",
                epoch, rec.train_loss, rec.val_loss, rec.val_dice, rec.lr
            );
        }
        history.records.push(rec);
        if val_loss.is_finite() && val_loss < best.0 {
            best = (val_loss, params.clone(), epoch);
        }
    }
    let (_, mut best_params, best_epoch) = best;
    best_params.params_mut().iter_mut().for_each(|p| {
        p.grad.fill(0.0);
        p.momentum_buf.fill(0.0);
    });
    history.best_epoch = best_epoch;
    Ok((best_params, history))
}
