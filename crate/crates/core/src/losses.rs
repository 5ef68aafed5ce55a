//! Training objectives. Every loss returns its value together with the
//! gradient on the logits it was evaluated at, except the proximal penalty
//! which lives in parameter space.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::head::{HeadGrads, HeadParams, Mode};
use crate::math::{argmax, dot, ln, normalize, softmax_backward, Matrix, LOG_FLOOR};

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad_logits: Matrix,
}

impl LossValue {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            value: 0.0,
            grad_logits: Matrix::zeros(rows, cols),
        }
    }

    /// `self += weight * other`
    pub fn accumulate(&mut self, weight: f64, other: &LossValue) {
        self.value += weight * other.value;
        crate::math::axpy(
            weight,
            other.grad_logits.as_slice(),
            self.grad_logits.as_mut_slice(),
        );
    }
}

fn check_targets(targets: &[usize], rows: usize, classes: usize) -> Result<()> {
    if targets.len() != rows {
        return Err(Error::DimensionMismatch {
            expected: rows,
            actual: targets.len(),
        });
    }
    if rows == 0 {
        return Err(Error::EmptyDataset);
    }
    match targets.iter().find(|&&t| t >= classes) {
        Some(&label) => Err(Error::LabelOutOfRange {
            label,
            num_classes: classes,
        }),
        None => Ok(()),
    }
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + ln(row.iter().map(|&v| crate::math::exp(v - max)).sum::<f64>());
    row.iter().map(|&v| v - lse).collect()
}

/// Cross-entropy against `(1 - epsilon) * onehot + epsilon / C`.
pub fn ce_smooth(logits: &Matrix, targets: &[usize], epsilon: f64) -> Result<LossValue> {
    let (b, c) = (logits.rows(), logits.cols());
    check_targets(targets, b, c)?;
    if !(0.0..1.0).contains(&epsilon) {
        return Err(invalid("label smoothing must lie in [0, 1)"));
    }
    let inv_b = 1.0 / b as f64;
    let off = epsilon / c as f64;
    let mut out = LossValue::zeros(b, c);
    for (i, &target) in targets.iter().enumerate() {
        let logp = log_softmax(logits.row(i));
        let g = out.grad_logits.row_mut(i);
        for k in 0..c {
            let t = off + if k == target { 1.0 - epsilon } else { 0.0 };
            out.value -= t * logp[k] * inv_b;
            g[k] = (crate::math::exp(logp[k]) - t) * inv_b;
        }
    }
    Ok(out)
}

/// Cross-entropy of `softmax(logits + ln counts)`. Classes with a zero count
/// drop out of the softmax; a target with zero count is an error.
pub fn balanced_softmax_ce(
    logits: &Matrix,
    targets: &[usize],
    class_counts: &[usize],
) -> Result<LossValue> {
    let (b, c) = (logits.rows(), logits.cols());
    check_targets(targets, b, c)?;
    if class_counts.len() != c {
        return Err(Error::DimensionMismatch {
            expected: c,
            actual: class_counts.len(),
        });
    }
    if let Some(&t) = targets.iter().find(|&&t| class_counts[t] == 0) {
        return Err(invalid(alloc::format!("target class {t} has zero count")));
    }
    let log_prior: Vec<f64> = class_counts
        .iter()
        .map(|&n| {
            if n == 0 {
                f64::NEG_INFINITY
            } else {
                ln(n as f64)
            }
        })
        .collect();
    let inv_b = 1.0 / b as f64;
    let mut out = LossValue::zeros(b, c);
    let mut adjusted = vec![0.0; c];
    for i in 0..b {
        for ((a, &z), &lp) in adjusted.iter_mut().zip(logits.row(i)).zip(&log_prior) {
            *a = z + lp;
        }
        let logq = log_softmax(&adjusted);
        out.value -= logq[targets[i]] * inv_b;
        let g = out.grad_logits.row_mut(i);
        for k in 0..c {
            let q = if log_prior[k] == f64::NEG_INFINITY {
                0.0
            } else {
                crate::math::exp(logq[k])
            };
            g[k] = (q - if k == targets[i] { 1.0 } else { 0.0 }) * inv_b;
        }
    }
    Ok(out)
}

/// Information maximization: mean per-sample entropy minus the entropy of the
/// mean prediction. Lies in `[-ln C, ln C]`.
pub fn im_loss(probs: &Matrix) -> LossValue {
    let (b, c) = (probs.rows(), probs.cols());
    let mean = probs.mean_rows();
    let inv_b = 1.0 / b as f64;
    let mut value = -crate::math::entropy(&mean);
    let mut grad_p = Matrix::zeros(b, c);
    let log_mean: Vec<f64> = mean.iter().map(|&m| ln(m.max(LOG_FLOOR))).collect();
    for i in 0..b {
        let p = probs.row(i);
        value += crate::math::entropy(p) * inv_b;
        for (k, g) in grad_p.row_mut(i).iter_mut().enumerate() {
            *g = (log_mean[k] - ln(p[k].max(LOG_FLOOR))) * inv_b;
        }
    }
    LossValue {
        value,
        grad_logits: softmax_backward(probs, &grad_p),
    }
}

/// Negative entropy of the mean prediction (the diversity half of [`im_loss`]).
pub fn diversity_loss(probs: &Matrix) -> LossValue {
    let (b, c) = (probs.rows(), probs.cols());
    let mean = probs.mean_rows();
    let inv_b = 1.0 / b as f64;
    let mut grad_p = Matrix::zeros(b, c);
    for i in 0..b {
        for (k, g) in grad_p.row_mut(i).iter_mut().enumerate() {
            *g = (ln(mean[k].max(LOG_FLOOR)) + 1.0) * inv_b;
        }
    }
    LossValue {
        value: -crate::math::entropy(&mean),
        grad_logits: softmax_backward(probs, &grad_p),
    }
}

/// Eval-mode bottleneck features (unit rows) and predictions for every
/// training sample of one client.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBank {
    pub features: Matrix,
    pub probs: Matrix,
    pub labels_pseudo: Vec<usize>,
    /// Optimizer steps taken since the bank was last rebuilt.
    pub staleness: usize,
    neighbors: Option<(usize, Vec<Vec<usize>>)>,
}

const BANK_CHUNK: usize = 512;

impl FeatureBank {
    /// Runs `head` in eval mode over `data`.
    pub fn build(head: &HeadParams, data: &Matrix) -> Result<Self> {
        let n = data.rows();
        let mut features = Matrix::zeros(n, head.bottleneck_dim);
        let mut probs = Matrix::zeros(n, head.num_classes);
        let mut start = 0;
        while start < n {
            let end = (start + BANK_CHUNK).min(n);
            let idx: Vec<usize> = (start..end).collect();
            let out = head.forward(&data.select_rows(&idx), Mode::Eval)?;
            for (o, i) in (start..end).enumerate() {
                features.row_mut(i).copy_from_slice(out.features.row(o));
                probs.row_mut(i).copy_from_slice(out.probs.row(o));
            }
            start = end;
        }
        Ok(Self::from_parts(features, probs))
    }

    /// Normalizes the feature rows; pseudo-labels start at the argmax.
    pub fn from_parts(mut features: Matrix, probs: Matrix) -> Self {
        for i in 0..features.rows() {
            normalize(features.row_mut(i));
        }
        let labels_pseudo = probs.row_iter().map(argmax).collect();
        Self {
            features,
            probs,
            labels_pseudo,
            staleness: 0,
            neighbors: None,
        }
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_classes(&self) -> usize {
        self.probs.cols()
    }

    /// The `k` most cosine-similar other entries, most similar first; ties
    /// go to the lower index.
    pub fn neighbors_of(&self, i: usize, k: usize) -> Vec<usize> {
        let f = self.features.row(i);
        let mut scored: Vec<(f64, usize)> = (0..self.len())
            .filter(|&j| j != i)
            .map(|j| (dot(f, self.features.row(j)), j))
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        scored.truncate(k);
        scored.into_iter().map(|(_, j)| j).collect()
    }

    /// Precomputes neighbor lists for every entry.
    pub fn index_neighbors(&mut self, k: usize) {
        let lists = (0..self.len()).map(|i| self.neighbors_of(i, k)).collect();
        self.neighbors = Some((k, lists));
    }

    fn neighbors(&self, i: usize, k: usize) -> Vec<usize> {
        match &self.neighbors {
            Some((kk, lists)) if *kk == k => lists[i].clone(),
            _ => self.neighbors_of(i, k),
        }
    }
}

/// Cosine similarity of `f` to each centroid, `None` where the centroid is zero.
fn centroid_scores(f: &[f64], centroids: &[Vec<f64>]) -> Vec<Option<f64>> {
    centroids
        .iter()
        .map(|c| {
            let n = crate::math::norm(c);
            (n > 0.0).then(|| dot(f, c) / n)
        })
        .collect()
}

/// Nearest centroid by cosine; near-ties are broken by the sample's own
/// predicted probability.
fn nearest(scores: &[Option<f64>], probs: &[f64]) -> usize {
    let mut best: Option<(f64, usize)> = None;
    for (k, s) in scores.iter().enumerate() {
        let Some(s) = *s else { continue };
        best = match best {
            None => Some((s, k)),
            Some((bs, bk)) => {
                if s > bs + 1e-12 || ((s - bs).abs() <= 1e-12 && probs[k] > probs[bk]) {
                    Some((s, k))
                } else {
                    Some((bs, bk))
                }
            }
        };
    }
    best.map_or_else(|| argmax(probs), |(_, k)| k)
}

/// Two-pass centroid pseudo-labels: probability-weighted centroids, nearest
/// assignment by cosine, then hard-assignment centroids and a second
/// assignment. A class left empty after the first pass keeps its first-pass
/// centroid.
pub fn shot_pseudo_labels(bank: &FeatureBank) -> Vec<usize> {
    let (n, c, d) = (bank.len(), bank.num_classes(), bank.features.cols());
    let mut soft = vec![vec![0.0; d]; c];
    for i in 0..n {
        let f = bank.features.row(i);
        for (k, &p) in bank.probs.row(i).iter().enumerate() {
            crate::math::axpy(p, f, &mut soft[k]);
        }
    }
    let first: Vec<usize> = (0..n)
        .map(|i| {
            nearest(
                &centroid_scores(bank.features.row(i), &soft),
                bank.probs.row(i),
            )
        })
        .collect();

    let mut hard = vec![vec![0.0; d]; c];
    let mut counts = vec![0usize; c];
    for (i, &l) in first.iter().enumerate() {
        crate::math::axpy(1.0, bank.features.row(i), &mut hard[l]);
        counts[l] += 1;
    }
    for k in 0..c {
        if counts[k] == 0 {
            hard[k] = soft[k].clone();
        }
    }
    (0..n)
        .map(|i| {
            nearest(
                &centroid_scores(bank.features.row(i), &hard),
                bank.probs.row(i),
            )
        })
        .collect()
}

fn histogram(labels: &[usize], classes: usize) -> Vec<usize> {
    let mut h = vec![0; classes];
    for &l in labels {
        h[l] += 1;
    }
    h
}

/// Certainty-based correction: a sample whose top-1/top-2 probability margin
/// is below `tau` moves to its top-2 class when that class is a minority
/// (count below the uniform share) in the histogram of `pseudo`.
pub fn isfda_correct_labels(bank: &FeatureBank, pseudo: &[usize], tau: f64) -> Vec<usize> {
    let c = bank.num_classes();
    let n = pseudo.len();
    let hist = histogram(pseudo, c);
    let share = n as f64 / c as f64;
    pseudo
        .iter()
        .enumerate()
        .map(|(i, &label)| {
            let p = bank.probs.row(i);
            if c < 2 {
                return label;
            }
            let top1 = argmax(p);
            let mut top2 = if top1 == 0 { 1 } else { 0 };
            for k in 0..c {
                if k != top1 && p[k] > p[top2] {
                    top2 = k;
                }
            }
            if p[top1] - p[top2] < tau && (hist[top2] as f64) < share {
                top2
            } else {
                label
            }
        })
        .collect()
}

/// Attraction to the `k` nearest bank neighbors plus `beta`-weighted
/// dispersion from the mean prediction of all non-neighbors:
///
/// `mean_i [ -(1/k) sum_{j in kNN(i)} <p_i, p_j> + beta <p_i, mean_{j not in kNN(i), j != i} p_j> ]`
///
/// Bank entries are constants; the gradient flows through `probs_batch` only.
pub fn knn_consistency_loss(
    bank: &FeatureBank,
    batch_indices: &[usize],
    probs_batch: &Matrix,
    k: usize,
    beta: f64,
) -> Result<LossValue> {
    let n = bank.len();
    let (b, c) = (probs_batch.rows(), probs_batch.cols());
    if k == 0 || k >= n {
        return Err(invalid(alloc::format!(
            "neighborhood size {k} must lie in [1, {n})"
        )));
    }
    if batch_indices.len() != b {
        return Err(Error::DimensionMismatch {
            expected: b,
            actual: batch_indices.len(),
        });
    }
    if c != bank.num_classes() {
        return Err(Error::DimensionMismatch {
            expected: bank.num_classes(),
            actual: c,
        });
    }
    let total: Vec<f64> = {
        let mut t = vec![0.0; c];
        for r in bank.probs.row_iter() {
            crate::math::axpy(1.0, r, &mut t);
        }
        t
    };
    let inv_b = 1.0 / b as f64;
    let inv_k = 1.0 / k as f64;
    let mut value = 0.0;
    let mut grad_p = Matrix::zeros(b, c);
    for (row, &i) in batch_indices.iter().enumerate() {
        if i >= n {
            return Err(invalid(alloc::format!("bank index {i} out of range")));
        }
        let p = probs_batch.row(row);
        let nbrs = bank.neighbors(i, k);
        let mut attract = vec![0.0; c];
        for &j in &nbrs {
            crate::math::axpy(1.0, bank.probs.row(j), &mut attract);
        }
        let g = grad_p.row_mut(row);
        value -= inv_b * inv_k * dot(p, &attract);
        crate::math::axpy(-inv_b * inv_k, &attract, g);

        let others = n - 1 - k;
        if beta != 0.0 && others > 0 {
            let mut disperse = total.clone();
            crate::math::axpy(-1.0, bank.probs.row(i), &mut disperse);
            crate::math::axpy(-1.0, &attract, &mut disperse);
            disperse.iter_mut().for_each(|v| *v /= others as f64);
            value += inv_b * beta * dot(p, &disperse);
            crate::math::axpy(inv_b * beta, &disperse, g);
        }
    }
    Ok(LossValue {
        value,
        grad_logits: softmax_backward(probs_batch, &grad_p),
    })
}

/// `(mu / 2) * ||theta - theta_global||^2` over the trainable tensors and its
/// gradient `mu * (theta - theta_global)`.
pub fn prox_penalty(params: &HeadParams, global: &HeadParams, mu: f64) -> Result<(f64, HeadGrads)> {
    if !params.same_shape(global) {
        return Err(invalid("prox penalty needs congruent heads"));
    }
    let mut grads = HeadGrads::zeros_like(params);
    let mut sq = 0.0;
    let frozen = params.classifier_is_frozen();
    for (t, ((g, a), b)) in grads
        .tensors_mut()
        .into_iter()
        .zip(params.trainable())
        .zip(global.trainable())
        .enumerate()
    {
        if frozen && t >= 4 {
            continue;
        }
        for ((gi, &ai), &bi) in g.iter_mut().zip(a).zip(b) {
            let d = ai - bi;
            sq += d * d;
            *gi = mu * d;
        }
    }
    Ok((0.5 * mu * sq, grads))
}
