//! The source/target splitting protocol.
//!
//! The source domain is subsampled per class to an (optionally long-tailed)
//! profile and split 80/20 into train/val. The target domain gives up a
//! class-balanced test set; the remainder is dealt to `K` clients class by
//! class with Dirichlet proportions, and every client splits its share 80/20
//! per class.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::AtomicUsize;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};

use crate::dataset::{FeatureDataset, GuardedDataset};
use crate::error::{invalid, Error, Result};
use crate::math::ln;
use crate::rng::{rng_from, stream};

/// Per-class sampling profile of the source subset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ImbalanceProfile {
    Balanced,
    /// Exponential long tail: the class at rank `r` (in a seed-shuffled
    /// order) gets weight `ratio^(-r / (C - 1))`.
    LongTail {
        ratio: f64,
        class_order_seed: u64,
    },
}

impl ImbalanceProfile {
    pub fn ratio(&self) -> f64 {
        match self {
            Self::Balanced => 1.0,
            Self::LongTail { ratio, .. } => *ratio,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Balanced => Ok(()),
            Self::LongTail { ratio, .. } if *ratio > 1.0 && ratio.is_finite() => Ok(()),
            Self::LongTail { ratio, .. } => Err(invalid(alloc::format!(
                "long-tail ratio must be finite and > 1, got {ratio}"
            ))),
        }
    }

    /// Class weights, largest = 1.
    pub fn class_weights(&self, num_classes: usize) -> Vec<f64> {
        match *self {
            Self::Balanced => vec![1.0; num_classes],
            Self::LongTail {
                ratio,
                class_order_seed,
            } => {
                let mut order: Vec<usize> = (0..num_classes).collect();
                order.shuffle(&mut rng_from(class_order_seed, &[stream::CLASS_ORDER]));
                let mut w = vec![1.0; num_classes];
                if num_classes > 1 {
                    let span = (num_classes - 1) as f64;
                    for (rank, &class) in order.iter().enumerate() {
                        w[class] = crate::math::exp(-(rank as f64) / span * ln(ratio));
                    }
                }
                w
            }
        }
    }

    /// Per-class counts summing to roughly `total`; every class gets at least
    /// one sample.
    pub fn class_counts(&self, total: usize, num_classes: usize) -> Vec<usize> {
        match self {
            Self::Balanced => vec![(total / num_classes).max(1); num_classes],
            Self::LongTail { .. } => {
                let w = self.class_weights(num_classes);
                let n_max = total as f64 / w.iter().sum::<f64>();
                w.iter()
                    .map(|wc| (libm::round(n_max * wc) as usize).max(1))
                    .collect()
            }
        }
    }

    /// Like [`ImbalanceProfile::class_counts`], but shrinks the largest class
    /// count until every class fits in `available`, keeping the ratio. An
    /// empty class cannot be served and is an error.
    pub fn fitted_counts(&self, total: usize, available: &[usize]) -> Result<Vec<usize>> {
        if let Some(class) = available.iter().position(|&a| a == 0) {
            return Err(Error::InsufficientSamples {
                class,
                requested: 1,
                available: 0,
            });
        }
        let c = available.len();
        let w = self.class_weights(c);
        let wanted = total as f64 / w.iter().sum::<f64>();
        let fits = w
            .iter()
            .zip(available)
            .map(|(wc, &a)| a as f64 / wc)
            .fold(f64::INFINITY, f64::min);
        if fits < wanted {
            log::debug!(
                "source profile scaled from {wanted:.1} to {fits:.1} records in the largest class"
            );
        }
        let n_max = wanted.min(fits);
        Ok(w.iter()
            .zip(available)
            .map(|(wc, &a)| (libm::round(n_max * wc) as usize).clamp(1, a))
            .collect())
    }
}

/// Size of the training part when `n` samples are split 80/20
/// (`round(0.8 * n)`, halves rounded up).
pub fn train_count(n: usize) -> usize {
    (4 * n + 2) / 5
}

/// A labeled source subset split into train and validation parts.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceSplit {
    pub train: FeatureDataset,
    pub val: FeatureDataset,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
}

fn shuffled_class_indices(
    ds: &FeatureDataset,
    available: Option<&[usize]>,
    seed: u64,
    tag: u64,
) -> Vec<Vec<usize>> {
    let mut by_class = match available {
        None => ds.indices_by_class(),
        Some(idx) => {
            let mut out = vec![Vec::new(); ds.num_classes()];
            for &i in idx {
                out[ds.label(i)].push(i);
            }
            out
        }
    };
    for (c, idx) in by_class.iter_mut().enumerate() {
        idx.sort_unstable();
        idx.shuffle(&mut rng_from(seed, &[tag, c as u64]));
    }
    by_class
}

pub fn make_source_split(
    ds: &FeatureDataset,
    profile: &ImbalanceProfile,
    take_fraction: f64,
    seed: u64,
) -> Result<SourceSplit> {
    source_split(ds, profile, take_fraction, seed, false)
}

/// Source split of a dataset that also supplies the target. No class gives
/// up more than `take_fraction` of its records, so every class stays
/// represented in the remainder.
pub fn make_shared_source_split(
    ds: &FeatureDataset,
    profile: &ImbalanceProfile,
    take_fraction: f64,
    seed: u64,
) -> Result<SourceSplit> {
    source_split(ds, profile, take_fraction, seed, true)
}

fn source_split(
    ds: &FeatureDataset,
    profile: &ImbalanceProfile,
    take_fraction: f64,
    seed: u64,
    cap_per_class: bool,
) -> Result<SourceSplit> {
    profile.validate()?;
    if !(take_fraction > 0.0 && take_fraction <= 1.0) {
        return Err(invalid("take_fraction must lie in (0, 1]"));
    }
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let total = libm::round(take_fraction * ds.len() as f64) as usize;
    let by_class = shuffled_class_indices(ds, None, seed, stream::SOURCE_SPLIT);
    let available: Vec<usize> = by_class
        .iter()
        .map(|v| {
            if cap_per_class {
                libm::floor(take_fraction * v.len() as f64) as usize
            } else {
                v.len()
            }
        })
        .collect();
    let counts = profile.fitted_counts(total, &available)?;
    let mut train_indices = Vec::new();
    let mut val_indices = Vec::new();
    for (c, (&want, idx)) in counts.iter().zip(&by_class).enumerate() {
        if want > idx.len() {
            return Err(Error::InsufficientSamples {
                class: c,
                requested: want,
                available: idx.len(),
            });
        }
        let n_train = train_count(want);
        train_indices.extend_from_slice(&idx[..n_train]);
        val_indices.extend_from_slice(&idx[n_train..want]);
    }
    Ok(SourceSplit {
        train: ds.subset(&train_indices),
        val: ds.subset(&val_indices),
        train_indices,
        val_indices,
    })
}

/// `C` rows of client proportions, each a draw from `Dirichlet(alpha * 1_K)`.
/// `alpha = +inf` is the IID limit: every row is uniform.
pub fn dirichlet_proportions(
    alpha: f64,
    k: usize,
    num_classes: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    if !(alpha > 0.0) {
        return Err(invalid("alpha must be positive"));
    }
    if k == 0 || num_classes == 0 {
        return Err(invalid("K and C must be at least 1"));
    }
    if alpha == f64::INFINITY {
        return Ok(vec![vec![1.0 / k as f64; k]; num_classes]);
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| invalid(alloc::format!("{e}")))?;
    let mut rows = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        let mut rng = rng_from(seed, &[stream::DIRICHLET, c as u64]);
        let mut row: Vec<f64> = (0..k).map(|_| gamma.sample(&mut rng)).collect();
        let sum: f64 = row.iter().sum();
        if sum > 0.0 && sum.is_finite() {
            row.iter_mut().for_each(|v| *v /= sum);
        } else {
            // every gamma draw underflowed: the limit is a random vertex
            let hot = rng.random_range(0..k);
            row = vec![0.0; k];
            row[hot] = 1.0;
        }
        rows.push(row);
    }
    Ok(rows)
}

/// One target client: unlabeled training data plus a labeled validation set.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientShard {
    pub client_id: usize,
    /// Labels are only reachable through counted accessors.
    pub train: GuardedDataset,
    pub val: FeatureDataset,
    label_histogram: Vec<usize>,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
}

impl ClientShard {
    /// True class histogram of train + val. Counts as a label read.
    pub fn label_histogram(&self) -> &[usize] {
        let _ = self.train.labels();
        &self.label_histogram
    }

    pub fn train_len(&self) -> usize {
        self.train.len()
    }
}

/// Balanced target test set plus the client shards.
#[derive(Debug, Clone)]
pub struct TargetSplit {
    pub test: FeatureDataset,
    pub test_indices: Vec<usize>,
    pub clients: Vec<ClientShard>,
    pub label_reads: Arc<AtomicUsize>,
}

impl PartialEq for TargetSplit {
    fn eq(&self, other: &Self) -> bool {
        self.test == other.test
            && self.test_indices == other.test_indices
            && self.clients == other.clients
    }
}

impl TargetSplit {
    pub fn label_reads(&self) -> usize {
        self.label_reads.load(core::sync::atomic::Ordering::Relaxed)
    }
}

pub fn make_target_split(
    ds: &FeatureDataset,
    k: usize,
    alpha: f64,
    test_fraction: f64,
    seed: u64,
) -> Result<TargetSplit> {
    let all: Vec<usize> = (0..ds.len()).collect();
    make_target_split_from(ds, &all, k, alpha, test_fraction, seed)
}

/// Like [`make_target_split`] but restricted to the records in `available`.
pub fn make_target_split_from(
    ds: &FeatureDataset,
    available: &[usize],
    k: usize,
    alpha: f64,
    test_fraction: f64,
    seed: u64,
) -> Result<TargetSplit> {
    if k == 0 {
        return Err(invalid("K must be at least 1"));
    }
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(invalid("test_fraction must lie in [0, 1)"));
    }
    if available.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let c = ds.num_classes();
    let by_class = shuffled_class_indices(ds, Some(available), seed, stream::TARGET_SPLIT);
    let wanted = libm::round(test_fraction * available.len() as f64 / c as f64) as usize;
    let scarcest = by_class.iter().map(Vec::len).min().unwrap_or(0);
    let per_class_test = if wanted > scarcest {
        log::warn!(
            "balanced test wants {wanted} per class; capping at scarcest class size {scarcest}"
        );
        scarcest
    } else {
        wanted
    };
    if per_class_test == 0 && test_fraction > 0.0 {
        let (class, available) = by_class
            .iter()
            .enumerate()
            .min_by_key(|(_, v)| v.len())
            .map(|(i, v)| (i, v.len()))
            .unwrap();
        return Err(Error::InsufficientSamples {
            class,
            requested: wanted.max(1),
            available,
        });
    }

    let proportions = dirichlet_proportions(alpha, k, c, seed)?;
    let mut test_indices = Vec::with_capacity(per_class_test * c);
    let mut client_train = vec![Vec::new(); k];
    let mut client_val = vec![Vec::new(); k];
    let mut histograms = vec![vec![0usize; c]; k];
    for (class, idx) in by_class.iter().enumerate() {
        test_indices.extend_from_slice(&idx[..per_class_test]);
        let rest = &idx[per_class_test..];
        let mut start = 0;
        let mut cum = 0.0;
        for client in 0..k {
            cum += proportions[class][client];
            let end = if client + 1 == k {
                rest.len()
            } else {
                (libm::round(cum * rest.len() as f64) as usize).clamp(start, rest.len())
            };
            let chunk = &rest[start..end];
            let n_train = train_count(chunk.len());
            client_train[client].extend_from_slice(&chunk[..n_train]);
            client_val[client].extend_from_slice(&chunk[n_train..]);
            histograms[client][class] += chunk.len();
            start = end;
        }
    }

    let reads = Arc::new(AtomicUsize::new(0));
    let clients = client_train
        .into_iter()
        .zip(client_val)
        .zip(histograms)
        .enumerate()
        .map(
            |(client_id, ((train_indices, val_indices), label_histogram))| ClientShard {
                client_id,
                train: GuardedDataset::with_counter(ds.subset(&train_indices), Arc::clone(&reads)),
                val: ds.subset(&val_indices),
                label_histogram,
                train_indices,
                val_indices,
            },
        )
        .collect();
    Ok(TargetSplit {
        test: ds.subset(&test_indices),
        test_indices,
        clients,
        label_reads: reads,
    })
}

/// Arguments of the full source + target partition.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionArgs {
    pub source_profile: ImbalanceProfile,
    pub take_fraction: f64,
    pub clients: usize,
    pub alpha: f64,
    pub test_fraction: f64,
    pub source_seed: u64,
    pub target_seed: u64,
}

impl Default for PartitionArgs {
    fn default() -> Self {
        Self {
            source_profile: ImbalanceProfile::Balanced,
            take_fraction: 0.6,
            clients: 3,
            alpha: 0.5,
            test_fraction: 0.2,
            source_seed: 0,
            target_seed: 0,
        }
    }
}

/// Index lists of a plan. Together with the two source files they
/// reproduce the plan exactly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlanIndices {
    pub source_train: Vec<usize>,
    pub source_val: Vec<usize>,
    pub target_test: Vec<usize>,
    pub client_train: Vec<Vec<usize>>,
    pub client_val: Vec<Vec<usize>>,
}

/// The complete data layout of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionPlan {
    pub source: SourceSplit,
    pub target: TargetSplit,
    pub alpha: f64,
    pub source_seed: u64,
    pub target_seed: u64,
}

impl PartitionPlan {
    /// Splits `source_ds` and `target_ds`. When `shared_domain` is set the two
    /// are the same dataset and the target split only draws from records not
    /// taken by the source split.
    pub fn build(
        source_ds: &FeatureDataset,
        target_ds: &FeatureDataset,
        shared_domain: bool,
        args: &PartitionArgs,
    ) -> Result<Self> {
        if source_ds.dim() != target_ds.dim() || source_ds.num_classes() != target_ds.num_classes()
        {
            return Err(invalid("source and target must share dim and num_classes"));
        }
        let source = if shared_domain {
            make_shared_source_split(
                source_ds,
                &args.source_profile,
                args.take_fraction,
                args.source_seed,
            )?
        } else {
            make_source_split(
                source_ds,
                &args.source_profile,
                args.take_fraction,
                args.source_seed,
            )?
        };
        let target = if shared_domain {
            let mut taken = vec![false; target_ds.len()];
            for &i in source.train_indices.iter().chain(&source.val_indices) {
                taken[i] = true;
            }
            let rest: Vec<usize> = (0..target_ds.len()).filter(|&i| !taken[i]).collect();
            make_target_split_from(
                target_ds,
                &rest,
                args.clients,
                args.alpha,
                args.test_fraction,
                args.target_seed,
            )?
        } else {
            make_target_split(
                target_ds,
                args.clients,
                args.alpha,
                args.test_fraction,
                args.target_seed,
            )?
        };
        Ok(Self {
            source,
            target,
            alpha: args.alpha,
            source_seed: args.source_seed,
            target_seed: args.target_seed,
        })
    }

    pub fn clients(&self) -> &[ClientShard] {
        &self.target.clients
    }

    pub fn indices(&self) -> PlanIndices {
        PlanIndices {
            source_train: self.source.train_indices.clone(),
            source_val: self.source.val_indices.clone(),
            target_test: self.target.test_indices.clone(),
            client_train: self
                .target
                .clients
                .iter()
                .map(|c| c.train_indices.clone())
                .collect(),
            client_val: self
                .target
                .clients
                .iter()
                .map(|c| c.val_indices.clone())
                .collect(),
        }
    }

    /// Rebuilds a plan from exported index lists.
    pub fn from_indices(
        source_ds: &FeatureDataset,
        target_ds: &FeatureDataset,
        idx: &PlanIndices,
        alpha: f64,
        source_seed: u64,
        target_seed: u64,
    ) -> Result<Self> {
        let check = |ds: &FeatureDataset, list: &[usize]| -> Result<()> {
            match list.iter().find(|&&i| i >= ds.len()) {
                Some(&i) => Err(invalid(alloc::format!(
                    "index {i} out of range for {} records",
                    ds.len()
                ))),
                None => Ok(()),
            }
        };
        check(source_ds, &idx.source_train)?;
        check(source_ds, &idx.source_val)?;
        check(target_ds, &idx.target_test)?;
        if idx.client_train.len() != idx.client_val.len() {
            return Err(invalid("client train/val lists differ in length"));
        }
        let reads = Arc::new(AtomicUsize::new(0));
        let mut clients = Vec::with_capacity(idx.client_train.len());
        for (client_id, (tr, va)) in idx.client_train.iter().zip(&idx.client_val).enumerate() {
            check(target_ds, tr)?;
            check(target_ds, va)?;
            let mut label_histogram = vec![0; target_ds.num_classes()];
            for &i in tr.iter().chain(va) {
                label_histogram[target_ds.label(i)] += 1;
            }
            clients.push(ClientShard {
                client_id,
                train: GuardedDataset::with_counter(target_ds.subset(tr), Arc::clone(&reads)),
                val: target_ds.subset(va),
                label_histogram,
                train_indices: tr.clone(),
                val_indices: va.clone(),
            });
        }
        Ok(Self {
            source: SourceSplit {
                train: source_ds.subset(&idx.source_train),
                val: source_ds.subset(&idx.source_val),
                train_indices: idx.source_train.clone(),
                val_indices: idx.source_val.clone(),
            },
            target: TargetSplit {
                test: target_ds.subset(&idx.target_test),
                test_indices: idx.target_test.clone(),
                clients,
                label_reads: reads,
            },
            alpha,
            source_seed,
            target_seed,
        })
    }
}
