//! The federated adaptation round loop.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::dataset::FeatureDataset;
use crate::error::{invalid, Error, Result};
use crate::head::{sgd_step, HeadParams, OptimizerState};
use crate::losses::{
    balanced_softmax_ce, ce_smooth, diversity_loss, im_loss, isfda_correct_labels,
    knn_consistency_loss, prox_penalty, shot_pseudo_labels, FeatureBank, LossValue,
};
use crate::math::Matrix;
use crate::metrics::evaluate_mar;
use crate::partition::{ClientShard, PartitionPlan};
use crate::rng::{rng_from, stream, SimRng};
use crate::source::shuffled_batches;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Aggregation {
    FedAvg,
    FedProx {
        mu: f64,
    },
    /// Fixed simplex ETF classifier; balanced softmax on pseudo-labels.
    FedEtf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SfdaMethod {
    /// Information maximization plus centroid pseudo-label cross-entropy.
    Shot,
    /// Neighborhood attraction plus a diversity term.
    Nrc,
    /// Neighborhood attraction and dispersion.
    Aad,
    /// SHOT with margin-based minority correction of the pseudo-labels.
    Isfda,
    /// Cross-entropy on the model's own argmax labels.
    Hard,
    /// SHOT on every client without aggregation.
    LocalOnly,
    /// No adaptation.
    SourceOnly,
}

impl SfdaMethod {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "shot" => Self::Shot,
            "nrc" => Self::Nrc,
            "aad" => Self::Aad,
            "isfda" => Self::Isfda,
            "hard" => Self::Hard,
            "local-only" | "local" => Self::LocalOnly,
            "source-only" | "source" => Self::SourceOnly,
            other => return Err(invalid(format!("unknown adaptation method {other:?}"))),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Shot => "shot",
            Self::Nrc => "nrc",
            Self::Aad => "aad",
            Self::Isfda => "isfda",
            Self::Hard => "hard",
            Self::LocalOnly => "local-only",
            Self::SourceOnly => "source-only",
        }
    }

    fn uses_neighbors(&self) -> bool {
        matches!(self, Self::Nrc | Self::Aad)
    }
}

/// How client validation scores are pooled for model selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Selection {
    #[default]
    SizeWeighted,
    Unweighted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FedConfig {
    pub rounds: usize,
    pub local_epochs: usize,
    pub aggregation: Aggregation,
    pub method: SfdaMethod,
    /// Weight of the pseudo-label term.
    pub lambda: f64,
    /// Margin threshold of the certainty correction.
    pub tau: f64,
    pub knn_k: usize,
    /// Dispersion weight in the first round; decays linearly after.
    pub beta: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Average batch-norm running statistics across clients. When off,
    /// every client keeps its own.
    pub share_bn_stats: bool,
    pub selection: Selection,
    pub seed: u64,
}

impl Default for FedConfig {
    fn default() -> Self {
        Self {
            rounds: 10,
            local_epochs: 5,
            aggregation: Aggregation::FedAvg,
            method: SfdaMethod::Shot,
            lambda: 0.3,
            tau: 0.2,
            knn_k: 3,
            beta: 1.0,
            batch_size: 64,
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 1e-3,
            share_bn_stats: true,
            selection: Selection::SizeWeighted,
            seed: 0,
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(invalid("at least one round is required"));
        }
        if self.batch_size < 2 {
            return Err(invalid("batch size must be at least 2"));
        }
        if let Aggregation::FedProx { mu } = self.aggregation {
            if !(mu.is_finite() && mu >= 0.0) {
                return Err(invalid("proximal weight must be finite and non-negative"));
            }
        }
        if self.knn_k == 0 {
            return Err(invalid("neighborhood size must be positive"));
        }
        Ok(())
    }

    /// Dispersion weight used in `round` (1-based).
    pub fn beta_at(&self, round: usize) -> f64 {
        let r = self.rounds.max(1) as f64;
        self.beta * (r - (round.max(1) - 1) as f64) / r
    }
}

/// Weighted mean of every tensor, running statistics included. Fixed ETF
/// prototypes are copied from the first head.
pub fn fedavg_aggregate(heads: &[HeadParams], weights: &[f64]) -> Result<HeadParams> {
    let first = heads.first().ok_or(Error::EmptyDataset)?;
    if weights.len() != heads.len() {
        return Err(Error::DimensionMismatch {
            expected: heads.len(),
            actual: weights.len(),
        });
    }
    if heads
        .iter()
        .any(|h| !first.same_shape(h) || h.classifier_mode != first.classifier_mode)
    {
        return Err(invalid("cannot aggregate heads of different shapes"));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(invalid(
            "aggregation weights must be finite and non-negative",
        ));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(invalid("aggregation weights are all zero"));
    }
    let mut out = first.clone();
    let frozen = first.classifier_is_frozen();
    // Accumulating offsets from the first head keeps identical inputs exact.
    for (t, dst) in out.tensors_mut().into_iter().enumerate() {
        if frozen && t >= 6 {
            continue;
        }
        for (h, &w) in heads.iter().zip(weights).skip(1) {
            let share = w / total;
            if share == 0.0 {
                continue;
            }
            let first_t = first.tensors()[t];
            for ((d, &x), &x0) in dst.iter_mut().zip(h.tensors()[t]).zip(first_t) {
                *d += share * (x - x0);
            }
        }
    }
    Ok(out)
}

/// Per-client random stream of one round.
pub fn client_rng(seed: u64, round: usize, client_id: usize) -> SimRng {
    rng_from(seed, &[stream::CLIENT, round as u64, client_id as u64])
}

/// Pseudo-labels for one local epoch, computed from a fresh bank.
pub fn epoch_targets(bank: &FeatureBank, cfg: &FedConfig) -> Vec<usize> {
    match cfg.method {
        SfdaMethod::Shot | SfdaMethod::LocalOnly => shot_pseudo_labels(bank),
        SfdaMethod::Isfda => isfda_correct_labels(bank, &shot_pseudo_labels(bank), cfg.tau),
        SfdaMethod::Hard => bank.labels_pseudo.clone(),
        SfdaMethod::Nrc | SfdaMethod::Aad | SfdaMethod::SourceOnly => Vec::new(),
    }
}

/// Local objective on one batch, as a function of its logits and
/// probabilities.
#[allow(clippy::too_many_arguments)]
pub fn batch_objective(
    cfg: &FedConfig,
    round: usize,
    bank: &FeatureBank,
    targets: &[usize],
    target_counts: &[usize],
    idx: &[usize],
    logits: &Matrix,
    probs: &Matrix,
) -> Result<LossValue> {
    let picked: Vec<usize> = idx
        .iter()
        .map(|&i| targets.get(i).copied().unwrap_or(0))
        .collect();
    match cfg.method {
        SfdaMethod::Nrc | SfdaMethod::Aad => {
            let k = cfg.knn_k.min(bank.len() - 1);
            let beta = if cfg.method == SfdaMethod::Aad {
                cfg.beta_at(round)
            } else {
                0.0
            };
            let mut loss = knn_consistency_loss(bank, idx, probs, k, beta)?;
            if cfg.method == SfdaMethod::Nrc {
                loss.accumulate(1.0, &diversity_loss(probs));
            }
            Ok(loss)
        }
        SfdaMethod::Hard => ce_smooth(logits, &picked, 0.0),
        _ => {
            let mut loss = im_loss(probs);
            let self_training = if cfg.aggregation == Aggregation::FedEtf {
                balanced_softmax_ce(logits, &picked, target_counts)?
            } else {
                ce_smooth(logits, &picked, 0.0)?
            };
            loss.accumulate(cfg.lambda, &self_training);
            Ok(loss)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalReport {
    pub client_id: usize,
    /// Mean objective of each local epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

/// Local source-free adaptation of the received head. Reads the client's
/// training features only, never their labels.
pub fn local_adapt(
    client: &ClientShard,
    global: &HeadParams,
    cfg: &FedConfig,
    round: usize,
) -> Result<(HeadParams, LocalReport)> {
    let mut report = LocalReport {
        client_id: client.client_id,
        epoch_losses: Vec::new(),
        steps: 0,
    };
    let n = client.train_len();
    if cfg.local_epochs == 0 || n < 2 || cfg.method == SfdaMethod::SourceOnly {
        return Ok((global.clone(), report));
    }
    if cfg.aggregation == Aggregation::FedEtf && !global.classifier_is_frozen() {
        return Err(invalid(
            "federated ETF adaptation needs a head with a fixed ETF classifier",
        ));
    }
    let data = client.train.to_matrix();
    let mut head = global.clone();
    let mut opt = OptimizerState::new(&head, cfg.learning_rate, cfg.momentum, cfg.weight_decay);
    let mut rng = client_rng(cfg.seed, round, client.client_id);
    let prox_mu = match cfg.aggregation {
        Aggregation::FedProx { mu } => Some(mu),
        _ => None,
    };

    for epoch in 1..=cfg.local_epochs {
        let mut bank = FeatureBank::build(&head, &data)?;
        if cfg.method.uses_neighbors() {
            bank.index_neighbors(cfg.knn_k.min(n - 1));
        }
        let targets = epoch_targets(&bank, cfg);
        let mut counts = vec![0usize; head.num_classes];
        targets.iter().for_each(|&t| counts[t] += 1);

        let mut loss_sum = 0.0;
        for idx in shuffled_batches(n, cfg.batch_size, &mut rng) {
            let pass = head.forward_train(&data.select_rows(&idx))?;
            let mut loss = batch_objective(
                cfg,
                round,
                &bank,
                &targets,
                &counts,
                &idx,
                &pass.output.logits,
                &pass.output.probs,
            )?;
            let mut grads = pass.backward(&head, &loss.grad_logits)?;
            if let Some(mu) = prox_mu {
                let (penalty, g) = prox_penalty(&head, global, mu)?;
                loss.value += penalty;
                grads.add_scaled(1.0, &g);
            }
            if !loss.value.is_finite() || !grads.is_finite() {
                return Err(Error::Diverged {
                    stage: format!("client {} round {round} epoch {epoch}", client.client_id),
                    loss: loss.value,
                });
            }
            head.update_running_stats(&pass);
            sgd_step(&mut head, &grads, &mut opt);
            bank.staleness += 1;
            report.steps += 1;
            loss_sum += loss.value * idx.len() as f64;
        }
        report.epoch_losses.push(loss_sum / n as f64);
    }
    Ok((head, report))
}

/// Executes the independent per-client jobs of one round.
pub trait ClientRunner {
    fn run(
        &self,
        jobs: usize,
        job: &(dyn Fn(usize) -> Result<(HeadParams, LocalReport)> + Sync),
    ) -> Vec<Result<(HeadParams, LocalReport)>>;
}

/// Runs clients one after another on the calling thread.
#[derive(Debug, Clone, Copy, Default)]
pub struct SerialRunner;

impl ClientRunner for SerialRunner {
    fn run(
        &self,
        jobs: usize,
        job: &(dyn Fn(usize) -> Result<(HeadParams, LocalReport)> + Sync),
    ) -> Vec<Result<(HeadParams, LocalReport)>> {
        (0..jobs).map(job).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundLog {
    pub round: usize,
    /// Each client's score of the post-round model on its validation split.
    pub client_val_mar: Vec<Option<f64>>,
    pub aggregated_val_mar: Option<f64>,
    /// Score on the held-out balanced test set.
    pub test_mar: Option<f64>,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptationResult {
    /// The kept server model. Without aggregation this is the source head.
    pub best_global: HeadParams,
    pub best_round: usize,
    pub history: Vec<RoundLog>,
    /// Test MAR of the selected round.
    pub test_mar: Option<f64>,
    /// Per-client models of the selected round when clients never aggregate.
    pub client_heads: Option<Vec<HeadParams>>,
    pub local_reports: Vec<Vec<LocalReport>>,
}

/// Index of the entry with the highest pooled validation MAR; the earliest
/// wins ties and entries without a score never win against scored ones.
pub fn select_best(history: &[RoundLog]) -> Result<usize> {
    if history.is_empty() {
        return Err(Error::EmptyHistory);
    }
    let mut best = 0;
    for (i, log) in history.iter().enumerate().skip(1) {
        let better = match (log.aggregated_val_mar, history[best].aggregated_val_mar) {
            (Some(a), Some(b)) => a > b,
            (Some(_), None) => true,
            _ => false,
        };
        if better {
            best = i;
        }
    }
    Ok(best)
}

fn pooled(scores: &[Option<f64>], sizes: &[usize], selection: Selection) -> Option<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for (s, &n) in scores.iter().zip(sizes) {
        if let Some(s) = s {
            let w = match selection {
                Selection::SizeWeighted => n as f64,
                Selection::Unweighted => 1.0,
            };
            num += w * s;
            den += w;
        }
    }
    (den > 0.0).then(|| num / den)
}

fn mean_present(values: &[Option<f64>]) -> Option<f64> {
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
}

fn with_stats(head: &HeadParams, stats: Option<&(Vec<f64>, Vec<f64>)>) -> HeadParams {
    let mut h = head.clone();
    if let Some((m, v)) = stats {
        h.bn.running_mean.clone_from(m);
        h.bn.running_var.clone_from(v);
    }
    h
}

/// Broadcast, local adaptation on every client, aggregation, and server-side
/// selection over `cfg.rounds` rounds.
pub fn run_adaptation(
    plan: &PartitionPlan,
    source_head: &HeadParams,
    cfg: &FedConfig,
    runner: &dyn ClientRunner,
) -> Result<AdaptationResult> {
    cfg.validate()?;
    let clients = plan.clients();
    let test: &FeatureDataset = &plan.target.test;
    if clients.is_empty() {
        return Err(invalid("no clients"));
    }
    if source_head.in_dim != test.dim() || source_head.num_classes != test.num_classes() {
        return Err(Error::DimensionMismatch {
            expected: source_head.in_dim,
            actual: test.dim(),
        });
    }
    let sizes: Vec<usize> = clients.iter().map(ClientShard::train_len).collect();
    let weights: Vec<f64> = sizes.iter().map(|&n| n as f64).collect();
    let k = clients.len();
    let score = |h: &HeadParams, c: &ClientShard| evaluate_mar(h, &c.val);

    if cfg.method == SfdaMethod::SourceOnly {
        let client_val_mar = clients
            .iter()
            .map(|c| score(source_head, c))
            .collect::<Result<Vec<_>>>()?;
        let log = RoundLog {
            round: 0,
            aggregated_val_mar: pooled(&client_val_mar, &sizes, cfg.selection),
            client_val_mar,
            test_mar: evaluate_mar(source_head, test)?,
            bytes: 0,
        };
        return Ok(AdaptationResult {
            best_global: source_head.clone(),
            best_round: 0,
            test_mar: log.test_mar,
            history: vec![log],
            client_heads: None,
            local_reports: Vec::new(),
        });
    }

    let local_only = cfg.method == SfdaMethod::LocalOnly;
    let payload = source_head.payload_len() as u64;
    let mut global = source_head.clone();
    let mut locals: Vec<HeadParams> = vec![source_head.clone(); k];
    let mut history = Vec::with_capacity(cfg.rounds);
    let mut kept: Vec<(HeadParams, Option<Vec<HeadParams>>)> = Vec::new();
    let mut local_reports = Vec::with_capacity(cfg.rounds);

    for round in 1..=cfg.rounds {
        let broadcast: Vec<HeadParams> = (0..k)
            .map(|c| {
                if local_only {
                    locals[c].clone()
                } else if cfg.share_bn_stats || round == 1 {
                    global.clone()
                } else {
                    let own = (
                        locals[c].bn.running_mean.clone(),
                        locals[c].bn.running_var.clone(),
                    );
                    with_stats(&global, Some(&own))
                }
            })
            .collect();
        let job = |c: usize| local_adapt(&clients[c], &broadcast[c], cfg, round);
        let outcomes = runner.run(k, &job);
        let mut reports = Vec::with_capacity(k);
        for (c, outcome) in outcomes.into_iter().enumerate() {
            let (head, report) = outcome?;
            locals[c] = head;
            reports.push(report);
        }
        local_reports.push(reports);

        let (client_val_mar, test_mar, bytes) = if local_only {
            let val = clients
                .iter()
                .zip(&locals)
                .map(|(c, h)| score(h, c))
                .collect::<Result<Vec<_>>>()?;
            let tests = locals
                .iter()
                .map(|h| evaluate_mar(h, test))
                .collect::<Result<Vec<_>>>()?;
            (val, mean_present(&tests), 0)
        } else {
            global = fedavg_aggregate(&locals, &weights)?;
            let val = clients
                .iter()
                .zip(&locals)
                .map(|(c, own)| {
                    if cfg.share_bn_stats {
                        score(&global, c)
                    } else {
                        let stats = (own.bn.running_mean.clone(), own.bn.running_var.clone());
                        score(&with_stats(&global, Some(&stats)), c)
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            (val, evaluate_mar(&global, test)?, 2 * k as u64 * payload)
        };
        let log = RoundLog {
            round,
            aggregated_val_mar: pooled(&client_val_mar, &sizes, cfg.selection),
            client_val_mar,
            test_mar,
            bytes,
        };
        log::debug!(
            "round {round}: val {:?} test {:?}",
            log.aggregated_val_mar,
            log.test_mar
        );
        history.push(log);
        kept.push(if local_only {
            (source_head.clone(), Some(locals.clone()))
        } else {
            (global.clone(), None)
        });
    }
    let best = select_best(&history)?;
    let (best_global, client_heads) = kept.swap_remove(best);
    Ok(AdaptationResult {
        best_global,
        best_round: history[best].round,
        test_mar: history[best].test_mar,
        history,
        client_heads,
        local_reports,
    })
}

/// Boxed runner, handy for choosing serial or parallel execution at run time.
pub type DynRunner = Box<dyn ClientRunner + Sync>;
