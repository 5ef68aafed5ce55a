//! Supervised training of the head on labeled source features.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::dataset::FeatureDataset;
use crate::error::{invalid, Error, Result};
use crate::head::{
    sgd_step, ClassifierMode, HeadParams, LrSchedule, OptimizerState, DEFAULT_BOTTLENECK,
};
use crate::losses::ce_smooth;
use crate::metrics::evaluate_mar;
use crate::rng::{stream, SimRng};

/// Class-balanced batches: within every batch the per-class counts differ by
/// at most one. Each class draws from its own reshuffled cycle, so minority
/// classes repeat once exhausted. `ceil(N / batch_size)` batches are produced.
pub fn balanced_batches(labels: &[usize], batch_size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if batch_size == 0 {
        return Err(invalid("batch size must be positive"));
    }
    let num_classes = labels.iter().max().map_or(0, |&m| m + 1);
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        pools[l].push(i);
    }
    let present: Vec<usize> = (0..num_classes).filter(|&c| !pools[c].is_empty()).collect();
    if present.len() < num_classes {
        log::warn!(
            "balanced sampling skips {} empty classes",
            num_classes - present.len()
        );
    }
    let p = present.len();
    let mut rng = rng(seed);
    let mut cycles: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    let base = batch_size / p;
    let extra = batch_size % p;
    let n_batches = labels.len().div_ceil(batch_size);
    let mut out = Vec::with_capacity(n_batches);
    for b in 0..n_batches {
        let mut batch = Vec::with_capacity(batch_size);
        for (slot, &c) in present.iter().enumerate() {
            let bonus = (slot + p - (b * extra) % p) % p < extra;
            for _ in 0..base + usize::from(bonus) {
                if cycles[c].is_empty() {
                    let mut fresh = pools[c].clone();
                    fresh.shuffle(&mut rng);
                    fresh.reverse();
                    cycles[c] = fresh;
                }
                batch.push(cycles[c].pop().expect("refilled above"));
            }
        }
        batch.shuffle(&mut rng);
        out.push(batch);
    }
    Ok(out)
}

fn rng(seed: u64) -> SimRng {
    crate::rng::rng(seed)
}

/// A random permutation of `0..n` cut into batches. A trailing batch of a
/// single sample is merged into its predecessor, as train-mode batch norm
/// needs two rows.
pub fn shuffled_batches(n: usize, batch_size: usize, rng: &mut SimRng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut out: Vec<Vec<usize>> = order
        .chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let last = out.pop().expect("non-empty");
        out.last_mut().expect("len > 1").extend(last);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub label_smoothing: f64,
    pub balanced_sampling: bool,
    pub bottleneck_dim: usize,
    pub classifier_mode: ClassifierMode,
    pub schedule: LrSchedule,
    pub seed: u64,
}

impl Default for SourceConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 64,
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 1e-3,
            label_smoothing: 0.1,
            balanced_sampling: false,
            bottleneck_dim: DEFAULT_BOTTLENECK,
            classifier_mode: ClassifierMode::Trainable,
            schedule: LrSchedule::Constant,
            seed: 0,
        }
    }
}

impl SourceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(invalid("source training needs at least one epoch"));
        }
        if self.batch_size < 2 {
            return Err(invalid("batch size must be at least 2"));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(invalid("label smoothing must lie in [0, 1)"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(invalid("learning rate must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mar: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceReport {
    pub rows: Vec<EpochRow>,
    pub best_epoch: usize,
    pub best_val_mar: f64,
}

/// Trains a fresh head with label-smoothed cross-entropy and returns the
/// snapshot with the highest validation MAR (earliest epoch on ties). When
/// `val` is empty the training set stands in for it.
pub fn train_source(
    train: &FeatureDataset,
    val: &FeatureDataset,
    cfg: &SourceConfig,
) -> Result<(HeadParams, SourceReport)> {
    cfg.validate()?;
    if train.len() < 2 {
        return Err(Error::EmptyDataset);
    }
    if val.dim() != train.dim() || val.num_classes() != train.num_classes() {
        return Err(Error::DimensionMismatch {
            expected: train.dim(),
            actual: val.dim(),
        });
    }
    let select_on = if val.is_empty() {
        log::warn!("empty source validation split; selecting on the training split");
        train
    } else {
        val
    };
    let labels: Vec<usize> = train.labels().iter().map(|&l| l as usize).collect();
    let mut head = HeadParams::init(
        train.dim(),
        cfg.bottleneck_dim,
        train.num_classes(),
        cfg.classifier_mode,
        crate::rng::derive_seed(cfg.seed, &[stream::HEAD_INIT]),
    )?;
    let mut opt = OptimizerState::new(&head, cfg.learning_rate, cfg.momentum, cfg.weight_decay);
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total_steps = (cfg.epochs * steps_per_epoch) as f64;
    let mut step = 0usize;
    let mut rows = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(HeadParams, usize, f64)> = None;

    for epoch in 1..=cfg.epochs {
        let batch_seed = crate::rng::derive_seed(cfg.seed, &[stream::SOURCE_BATCHES, epoch as u64]);
        let batches = if cfg.balanced_sampling {
            balanced_batches(&labels, cfg.batch_size, batch_seed)?
        } else {
            shuffled_batches(train.len(), cfg.batch_size, &mut rng(batch_seed))
        };
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for idx in &batches {
            if idx.len() < 2 {
                continue;
            }
            let x = train.batch(idx);
            let targets: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let pass = head.forward_train(&x)?;
            let loss = ce_smooth(&pass.output.logits, &targets, cfg.label_smoothing)?;
            if !loss.value.is_finite() {
                return Err(Error::Diverged {
                    stage: format!("source epoch {epoch}"),
                    loss: loss.value,
                });
            }
            let grads = pass.backward(&head, &loss.grad_logits)?;
            head.update_running_stats(&pass);
            opt.learning_rate = cfg.learning_rate * cfg.schedule.factor(step as f64 / total_steps);
            sgd_step(&mut head, &grads, &mut opt);
            step += 1;
            loss_sum += loss.value * idx.len() as f64;
            seen += idx.len();
        }
        if !head.is_finite() {
            return Err(Error::Diverged {
                stage: format!("source epoch {epoch}"),
                loss: f64::NAN,
            });
        }
        let val_mar = evaluate_mar(&head, select_on)?.unwrap_or(0.0);
        let train_loss = loss_sum / seen.max(1) as f64;
        log::debug!("source epoch {epoch}: loss {train_loss:.4} val MAR {val_mar:.4}");
        rows.push(EpochRow {
            epoch,
            train_loss,
            val_mar,
        });
        if best.as_ref().is_none_or(|b| val_mar > b.2) {
            best = Some((head.clone(), epoch, val_mar));
        }
    }
    let (head, best_epoch, best_val_mar) = best.expect("at least one epoch");
    Ok((
        head,
        SourceReport {
            rows,
            best_epoch,
            best_val_mar,
        },
    ))
}

/// Recall of each class of `data` under `head`; `None` for absent classes.
pub fn per_class_recall(head: &HeadParams, data: &FeatureDataset) -> Result<Vec<Option<f64>>> {
    Ok(crate::metrics::evaluate(head, data)?.recalls())
}
