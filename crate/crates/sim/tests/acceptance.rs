//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::{Duration, Instant};

use ciffreeda::config::{
    AggregationSpec, DataSource, ExperimentConfig, MethodSpec, Scenario, Setting, Shift,
};
use ciffreeda::pipeline::{held_out, CellResult, GridOutcome};
use ciffreeda::{run_grid, RayonRunner};
use ciffreeda_core::costs::{
    cost_report, CostLedger, ModelKind, TrainMode, HEAD_VIT_B_FLOPS, HEAD_VIT_S_FLOPS,
    RESNET101_FLOPS, RESNET50_FLOPS, VIT_B_FLOPS, VIT_S_FLOPS,
};
use ciffreeda_core::federation::{
    client_rng, fedavg_aggregate, run_adaptation, Aggregation, FedConfig, SerialRunner, SfdaMethod,
};
use ciffreeda_core::head::{
    init_etf, sgd_step, ClassifierMode, HeadGrads, HeadParams, OptimizerState,
};
use ciffreeda_core::losses::{
    balanced_softmax_ce, ce_smooth, im_loss, knn_consistency_loss, prox_penalty,
    shot_pseudo_labels, FeatureBank, LossValue,
};
use ciffreeda_core::math::{dot, Matrix};
use ciffreeda_core::metrics::{s2t_diff, s2t_under_label_shift};
use ciffreeda_core::partition::{
    make_source_split, train_count, ImbalanceProfile, PartitionArgs, PartitionPlan,
};
use ciffreeda_core::rng::rng;
use ciffreeda_core::source::{per_class_recall, shuffled_batches, train_source, SourceConfig};
use ciffreeda_core::synth::{generate_synthetic, SynthSpec};
use rand::Rng;

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn main() {
    let _ = env_logger::builder().is_test(true).try_init();
    let start = Instant::now();
    let criteria: Vec<Criterion> = vec![
        ("gradient suite", gradient_suite),
        ("etf geometry", etf_geometry),
        ("federation identities", federation_identities),
        ("partition protocol", partition_protocol),
        ("published numbers", published_numbers),
        ("synthetic substitute grid", synthetic_grid),
        ("target label hygiene", label_hygiene),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let t = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name} ({secs:.1}s): {detail}");
            }
        }
    }
    println!(
        "acceptance: {failed} failing, {:.1}s total",
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}

fn random_matrix(rows: usize, cols: usize, scale: f64, r: &mut impl Rng) -> Matrix {
    let v = (0..rows * cols)
        .map(|_| r.random_range(-scale..scale))
        .collect();
    Matrix::from_vec(rows, cols, v).unwrap()
}

fn random_head(r: &mut impl Rng, mode: ClassifierMode) -> HeadParams {
    let mut h = HeadParams::init(6, 5, 4, mode, r.random()).unwrap();
    h.bn.gamma
        .iter_mut()
        .for_each(|g| *g = r.random_range(0.5..1.5));
    h.bn.beta
        .iter_mut()
        .for_each(|b| *b = r.random_range(-0.5..0.5));
    h
}

fn trainable_mut(h: &mut HeadParams, t: usize) -> &mut Vec<f64> {
    match t {
        0 => &mut h.bottleneck_weight,
        1 => &mut h.bottleneck_bias,
        2 => &mut h.bn.gamma,
        3 => &mut h.bn.beta,
        4 => &mut h.classifier_weight,
        _ => &mut h.classifier_bias,
    }
}

/// Largest relative error between the analytic gradient of
/// `loss(head(batch))` and central differences over every trainable scalar.
fn fd_error(
    head: &HeadParams,
    batch: &Matrix,
    loss: &dyn Fn(&HeadParams, &Matrix, &Matrix) -> LossValue,
    extra: &dyn Fn(&HeadParams) -> (f64, Option<HeadGrads>),
) -> f64 {
    let value = |h: &HeadParams| {
        let out = h.forward_train(batch).unwrap().output;
        loss(h, &out.logits, &out.probs).value + extra(h).0
    };
    let pass = head.forward_train(batch).unwrap();
    let l = loss(head, &pass.output.logits, &pass.output.probs);
    let mut grads = pass.backward(head, &l.grad_logits).unwrap();
    if let (_, Some(g)) = extra(head) {
        grads.add_scaled(1.0, &g);
    }
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.to_vec()).collect();
    let tensors = if head.classifier_is_frozen() { 4 } else { 6 };
    let step = 1e-5;
    let mut worst: f64 = 0.0;
    for (t, a_t) in analytic.iter().enumerate().take(tensors) {
        for (i, &a) in a_t.iter().enumerate() {
            let mut plus = head.clone();
            let mut minus = head.clone();
            trainable_mut(&mut plus, t)[i] += step;
            trainable_mut(&mut minus, t)[i] -= step;
            let numeric = (value(&plus) - value(&minus)) / (2.0 * step);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
            worst = worst.max(rel);
        }
    }
    worst
}

fn gradient_suite() -> Check {
    let start = Instant::now();
    let points = 20;
    let b = 8;
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let none = |_: &HeadParams| (0.0, None);
    for p in 0..points {
        let mut r = rng(0xF1D0 + p);
        let head = random_head(&mut r, ClassifierMode::Trainable);
        let batch = random_matrix(b, 6, 1.5, &mut r);
        let targets: Vec<usize> = (0..b).map(|_| r.random_range(0..4)).collect();
        let eps = r.random_range(0.0..0.3);
        let counts: Vec<usize> = (0..4).map(|_| r.random_range(1..50)).collect();

        let mut record = |name, e: f64| {
            let w = worst.entry(name).or_insert(0.0);
            *w = w.max(e);
        };
        record(
            "ce_smooth",
            fd_error(
                &head,
                &batch,
                &|_, z, _| ce_smooth(z, &targets, eps).unwrap(),
                &none,
            ),
        );
        record(
            "balanced_softmax_ce",
            fd_error(
                &head,
                &batch,
                &|_, z, _| balanced_softmax_ce(z, &targets, &counts).unwrap(),
                &none,
            ),
        );
        record(
            "im_loss",
            fd_error(&head, &batch, &|_, _, p| im_loss(p), &none),
        );

        let bank_head = random_head(&mut r, ClassifierMode::Trainable);
        let bank_data = random_matrix(20, 6, 1.5, &mut r);
        let bank = FeatureBank::build(&bank_head, &bank_data).unwrap();
        let idx: Vec<usize> = (0..b).map(|i| (i * 7 + p as usize) % 20).collect();
        let beta = r.random_range(0.0..1.0);
        record(
            "knn_consistency_loss",
            fd_error(
                &head,
                &bank_data.select_rows(&idx),
                &|_, _, p| knn_consistency_loss(&bank, &idx, p, 3, beta).unwrap(),
                &none,
            ),
        );

        let mut global = head.clone();
        for t in 0..6 {
            trainable_mut(&mut global, t)
                .iter_mut()
                .for_each(|v| *v += r.random_range(-0.2..0.2));
        }
        let mu = r.random_range(0.01..1.0);
        record(
            "prox_penalty",
            fd_error(
                &head,
                &batch,
                &|_, z, _| ce_smooth(z, &targets, 0.1).unwrap(),
                &|h| {
                    let (v, g) = prox_penalty(h, &global, mu).unwrap();
                    (v, Some(g))
                },
            ),
        );
    }
    let elapsed = start.elapsed();
    let summary = worst.iter().fold(String::new(), |mut s, (k, v)| {
        let _ = write!(s, "{k} {v:.1e} ");
        s
    });
    ensure(worst.values().all(|&e| e < 1e-4), || {
        format!("relative error too large: {summary}")
    })?;
    ensure(elapsed < Duration::from_secs(30), || {
        format!("took {elapsed:?}")
    })?;
    Ok(format!(
        "{points} points each, worst {}",
        summary.trim_end()
    ))
}

fn etf_geometry() -> Check {
    let mut worst: f64 = 0.0;
    for c in [2usize, 4, 10, 65] {
        let m = init_etf(c, 256).map_err(|e| e.to_string())?;
        let target = -1.0 / (c as f64 - 1.0);
        for i in 0..c {
            worst = worst.max((dot(m.row(i), m.row(i)) - 1.0).abs());
            for j in 0..i {
                worst = worst.max((dot(m.row(i), m.row(j)) - target).abs());
            }
        }
    }
    ensure(worst < 1e-6, || format!("max deviation {worst:e}"))?;
    Ok(format!("C in {{2, 4, 10, 65}}, max deviation {worst:.1e}"))
}

fn toy_plan(clients: usize, alpha: f64, seed: u64) -> (PartitionPlan, HeadParams) {
    let spec = SynthSpec::new(16, 4, 1.0, 0.3, 7);
    let src = generate_synthetic(&spec.clone().with_seed(1), &[60; 4]).unwrap();
    let tgt = generate_synthetic(&spec.with_seed(2), &[90; 4]).unwrap();
    let args = PartitionArgs {
        clients,
        alpha,
        source_seed: seed,
        target_seed: seed,
        ..PartitionArgs::default()
    };
    let plan = PartitionPlan::build(&src, &tgt, false, &args).unwrap();
    let cfg = SourceConfig {
        epochs: 5,
        bottleneck_dim: 32,
        seed,
        ..SourceConfig::default()
    };
    let (head, _) = train_source(&plan.source.train, &plan.source.val, &cfg).unwrap();
    (plan, head)
}

fn small_fed(method: SfdaMethod, aggregation: Aggregation, seed: u64) -> FedConfig {
    FedConfig {
        rounds: 3,
        local_epochs: 2,
        batch_size: 32,
        method,
        aggregation,
        seed,
        ..FedConfig::default()
    }
}

fn bits(h: &HeadParams) -> Vec<u64> {
    h.tensors()
        .iter()
        .flat_map(|t| t.iter().map(|v| v.to_bits()))
        .collect()
}

fn federation_identities() -> Check {
    // identical clients
    let (plan, source) = toy_plan(3, 0.5, 0);
    let cfg = small_fed(SfdaMethod::Shot, Aggregation::FedAvg, 0);
    let (adapted, _) =
        ciffreeda_core::federation::local_adapt(&plan.clients()[0], &source, &cfg, 1)
            .map_err(|e| e.to_string())?;
    for k in 1..=5 {
        let heads = vec![adapted.clone(); k];
        let weights: Vec<f64> = (0..k).map(|i| 1.0 + 17.0 * i as f64).collect();
        let agg = fedavg_aggregate(&heads, &weights).map_err(|e| e.to_string())?;
        ensure(bits(&agg) == bits(&adapted), || {
            format!("K={k} identical heads changed")
        })?;
    }

    // one client, one epoch, one round against a hand-rolled centralized run
    let (plan, source) = toy_plan(1, 0.5, 3);
    let cfg = FedConfig {
        rounds: 1,
        local_epochs: 1,
        ..small_fed(SfdaMethod::Shot, Aggregation::FedAvg, 11)
    };
    let fed = run_adaptation(&plan, &source, &cfg, &SerialRunner).map_err(|e| e.to_string())?;
    let data = plan.clients()[0].train.to_matrix();
    let mut head = source.clone();
    let mut opt = OptimizerState::new(&head, cfg.learning_rate, cfg.momentum, cfg.weight_decay);
    let bank = FeatureBank::build(&head, &data).map_err(|e| e.to_string())?;
    let labels = shot_pseudo_labels(&bank);
    let mut r = client_rng(cfg.seed, 1, 0);
    for idx in shuffled_batches(data.rows(), cfg.batch_size, &mut r) {
        let batch = data.select_rows(&idx);
        let pass = head.forward_train(&batch).map_err(|e| e.to_string())?;
        let picked: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let mut loss = im_loss(&pass.output.probs);
        loss.accumulate(
            cfg.lambda,
            &ce_smooth(&pass.output.logits, &picked, 0.0).unwrap(),
        );
        let grads = pass
            .backward(&head, &loss.grad_logits)
            .map_err(|e| e.to_string())?;
        head.update_running_stats(&pass);
        sgd_step(&mut head, &grads, &mut opt);
    }
    let max_dev = head
        .tensors()
        .iter()
        .zip(fed.best_global.tensors())
        .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
        .fold(0.0f64, f64::max);
    ensure(max_dev < 1e-6, || {
        format!("K=1 federated run deviates from centralized by {max_dev:e}")
    })?;

    // serial and parallel client execution
    for seed in 0..5 {
        let (plan, source) = toy_plan(3, 0.5, seed);
        let cfg = small_fed(SfdaMethod::Shot, Aggregation::FedAvg, seed);
        let serial =
            run_adaptation(&plan, &source, &cfg, &SerialRunner).map_err(|e| e.to_string())?;
        let parallel =
            run_adaptation(&plan, &source, &cfg, &RayonRunner).map_err(|e| e.to_string())?;
        let same_history = format!("{:?}", serial.history) == format!("{:?}", parallel.history)
            && serial.history.iter().zip(&parallel.history).all(|(a, b)| {
                a.test_mar.map(f64::to_bits) == b.test_mar.map(f64::to_bits)
                    && a.aggregated_val_mar.map(f64::to_bits)
                        == b.aggregated_val_mar.map(f64::to_bits)
            });
        ensure(
            same_history && bits(&serial.best_global) == bits(&parallel.best_global),
            || format!("seed {seed}: serial and parallel runs differ"),
        )?;
    }
    Ok(format!(
        "identical clients exact for K=1..5; K=1 vs centralized max dev {max_dev:.1e}; serial == parallel over 5 seeds"
    ))
}

fn top_share(hist: &[usize]) -> f64 {
    let total: usize = hist.iter().sum();
    *hist.iter().max().unwrap_or(&0) as f64 / total.max(1) as f64
}

fn partition_protocol() -> Check {
    let spec = SynthSpec::new(8, 10, 1.0, 0.3, 0);
    let pool = generate_synthetic(&spec, &[150; 10]).unwrap();
    let n = pool.len();
    let profile = ImbalanceProfile::LongTail {
        ratio: 10.0,
        class_order_seed: 0,
    };
    for seed in 0..100u64 {
        let args = PartitionArgs {
            source_profile: profile,
            clients: 3,
            alpha: 0.5,
            source_seed: seed,
            target_seed: seed + 1000,
            ..PartitionArgs::default()
        };
        let plan = PartitionPlan::build(&pool, &pool, true, &args).map_err(|e| e.to_string())?;
        let idx = plan.indices();
        let mut seen = vec![0u8; n];
        let all = idx
            .source_train
            .iter()
            .chain(&idx.source_val)
            .chain(&idx.target_test)
            .chain(idx.client_train.iter().flatten())
            .chain(idx.client_val.iter().flatten());
        for &i in all {
            seen[i] += 1;
        }
        ensure(seen.iter().all(|&s| s == 1), || {
            format!("seed {seed}: splits overlap or miss records")
        })?;

        let test_counts = plan.target.test.class_counts();
        ensure(test_counts.iter().all(|&c| c == test_counts[0]), || {
            format!("seed {seed}: unbalanced test {test_counts:?}")
        })?;

        for c in plan.clients() {
            let train_counts = {
                let mut h = vec![0usize; 10];
                c.train
                    .reveal()
                    .labels()
                    .iter()
                    .for_each(|&l| h[l as usize] += 1);
                h
            };
            let val_counts = c.val.class_counts();
            for k in 0..10 {
                let total = train_counts[k] + val_counts[k];
                let expected = train_count(total) as i64;
                ensure((train_counts[k] as i64 - expected).abs() <= 1, || {
                    format!(
                        "seed {seed} client {} class {k}: {} train of {total}",
                        c.client_id, train_counts[k]
                    )
                })?;
            }
        }
    }

    let mut skewed = 0;
    for seed in 0..100u64 {
        let args = PartitionArgs {
            clients: 3,
            alpha: 0.1,
            source_seed: seed,
            target_seed: seed,
            ..PartitionArgs::default()
        };
        let plan = PartitionPlan::build(&pool, &pool, false, &args).map_err(|e| e.to_string())?;
        if plan
            .clients()
            .iter()
            .any(|c| top_share(c.label_histogram()) > 0.5)
        {
            skewed += 1;
        }
    }
    ensure(skewed >= 80, || {
        format!(
            "100 seeds disjoint, covering, balanced test, 80/20 within 1; but alpha 0.1 top-class share > 50% \
             in only {skewed}/100 seeds (per-class Dirichlet over clients)"
        )
    })?;
    Ok(format!(
        "100 seeds disjoint, covering, balanced test, 80/20 within 1; alpha 0.1 skewed in {skewed}/100"
    ))
}

fn published_numbers() -> Check {
    let forward = [
        (ModelKind::VitS, VIT_S_FLOPS, 11.0e9),
        (ModelKind::VitB, VIT_B_FLOPS, 43.9e9),
        (ModelKind::ResNet50, RESNET50_FLOPS, 24.6e9),
        (ModelKind::ResNet101, RESNET101_FLOPS, 46.9e9),
    ];
    for (kind, constant, published) in forward {
        let r = cost_report(
            &CostLedger::new(kind, TrainMode::Frozen, 10, 3).map_err(|e| e.to_string())?,
        );
        ensure(
            constant == published && r.forward_flops_per_image == published,
            || {
                format!(
                    "{} forward {} != {published}",
                    kind.name(),
                    r.forward_flops_per_image
                )
            },
        )?;
    }
    for (kind, constant, published) in [
        (ModelKind::HeadOnlyVitS, HEAD_VIT_S_FLOPS, 0.61e6),
        (ModelKind::HeadOnlyVitB, HEAD_VIT_B_FLOPS, 1.20e6),
    ] {
        let r = cost_report(
            &CostLedger::new(kind, TrainMode::Skipped, 10, 3).map_err(|e| e.to_string())?,
        );
        ensure(
            constant == published && r.forward_flops_per_image == published,
            || {
                format!(
                    "{} forward {} != {published}",
                    kind.name(),
                    r.forward_flops_per_image
                )
            },
        )?;
    }
    let head =
        HeadParams::init(384, 256, 65, ClassifierMode::Trainable, 0).map_err(|e| e.to_string())?;
    let params = head.parameter_count();
    let param_bytes = 4 * params;
    let payload = head.payload_len();
    ensure(params == 115_777, || format!("{params} parameters"))?;
    ensure(
        param_bytes.div_ceil(1000) == 464 && param_bytes / 1000 == 463,
        || format!("{param_bytes} parameter bytes"),
    )?;
    ensure(
        payload < 1_000_000 && head.serialize().len() == payload,
        || format!("payload {payload} bytes"),
    )?;

    let table2 = [
        ((0.826, 0.650), -17.6),
        ((0.874, 0.768), -10.6),
        ((0.899, 0.826), -7.3),
    ];
    for ((s, t), want) in table2 {
        let got = s2t_diff(s, t);
        ensure((got - want).abs() < 1e-9, || {
            format!("S2T diff {got} != {want}")
        })?;
    }
    let table4 = [
        ((0.608, 0.826), -21.8),
        ((0.714, 0.874), -16.0),
        ((0.781, 0.899), -11.8),
    ];
    for ((t, s), want) in table4 {
        let got = s2t_under_label_shift(t, s);
        ensure((got - want).abs() < 1e-9, || {
            format!("S2T diff under label shift {got} != {want}")
        })?;
    }
    Ok(format!(
        "forward FLOPs exact, head {params} params = {param_bytes} B (payload {payload} B < 1 MB), gaps -17.6/-10.6/-7.3 and -21.8/-16.0/-11.8"
    ))
}

fn grid_config(
    rotation_deg: f64,
    separabilities: Vec<f64>,
    aggregations: Vec<AggregationSpec>,
) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    if let DataSource::Synthetic(s) = &mut cfg.data {
        s.rotation_deg = rotation_deg;
        s.shift = Shift::ClassPlanes;
    }
    cfg.setting = Setting::Da;
    cfg.grid.scenarios = vec![Scenario::SITI];
    cfg.grid.methods = vec![MethodSpec(SfdaMethod::Shot)];
    cfg.grid.aggregations = aggregations;
    cfg.grid.separabilities = separabilities;
    cfg.grid.source_seeds = vec![0, 1, 2];
    cfg.grid.target_seeds = vec![0, 1, 2];
    cfg.workers = 0;
    cfg
}

fn checked_grid(cfg: &ExperimentConfig) -> Result<GridOutcome, String> {
    let out = run_grid(cfg, None).map_err(|e| format!("{e:#}"))?;
    if let Some(bad) = out.cells.iter().find(|c| c.error.is_some()) {
        return Err(format!(
            "cell {} failed: {}",
            bad.key.dir_name(),
            bad.error.as_deref().unwrap_or("")
        ));
    }
    Ok(out)
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn run_key(r: &CellResult) -> (u64, u64) {
    (r.key.source_seed, r.key.target_seed)
}

fn synthetic_grid() -> Check {
    let start = Instant::now();
    let mut lines = Vec::new();
    let mut failures = Vec::new();

    // extractor quality and the shrinking gap
    let seps = vec![0.5, 1.0, 2.0];
    let grid_a = checked_grid(&grid_config(
        45.0,
        seps.clone(),
        vec![AggregationSpec(Aggregation::FedAvg)],
    ))?;
    let by_sep = |s: f64| -> BTreeMap<(u64, u64), &CellResult> {
        grid_a
            .results()
            .filter(|r| r.separability == Some(s))
            .map(|r| (run_key(r), r))
            .collect()
    };
    let tables: Vec<_> = seps.iter().map(|&s| by_sep(s)).collect();
    for w in 0..2 {
        let (lo, hi) = (&tables[w], &tables[w + 1]);
        let wins = hi
            .iter()
            .filter(|(k, r)| r.target_mar > lo[*k].target_mar)
            .count();
        let line = format!(
            "(a) sep {} beats {} in {wins}/{}",
            seps[w + 1],
            seps[w],
            hi.len()
        );
        if wins < 8 {
            failures.push(line.clone());
        }
        lines.push(line);
    }
    let diffs: Vec<f64> = tables
        .iter()
        .map(|t| mean(t.values().map(|r| r.s2t_diff.unwrap_or(f64::NAN))))
        .collect();
    let line = format!(
        "(d) mean S2T diff {:.1}/{:.1}/{:.1}",
        diffs[0], diffs[1], diffs[2]
    );
    if !(diffs[0] < diffs[1] && diffs[1] < diffs[2]) {
        failures.push(line.clone());
    }
    lines.push(line);

    // adaptation premise on a 30 degree shift
    let grid_b1 = checked_grid(&grid_config(
        30.0,
        vec![1.0],
        vec![AggregationSpec(Aggregation::FedAvg)],
    ))?;
    let gain = mean(grid_b1.results().map(|r| {
        100.0 * (r.target_mar.unwrap_or(f64::NAN) - r.source_only_target_mar.unwrap_or(f64::NAN))
    }));
    let line = format!("(b) SHOT gain over source-only {gain:.1} points");
    if gain.is_nan() || gain < 5.0 {
        failures.push(line.clone());
    }
    lines.push(line);

    // balanced sampling under a 50:1 source
    match minority_recall() {
        Ok((wins, detail)) => {
            let line = format!("(c) balanced sampling wins {wins}/9 ({detail})");
            if wins < 8 {
                failures.push(line.clone());
            }
            lines.push(line);
        }
        Err(e) => failures.push(format!("(c) {e}")),
    }

    // aggregation variants on the high-separability config
    let mus = [1.0, 0.1, 0.01, 0.001];
    let mut aggs = vec![
        AggregationSpec(Aggregation::FedAvg),
        AggregationSpec(Aggregation::FedEtf),
    ];
    aggs.extend(
        mus.iter()
            .map(|&mu| AggregationSpec(Aggregation::FedProx { mu })),
    );
    let grid_b2 = checked_grid(&grid_config(30.0, vec![2.0], aggs))?;
    let stat = |agg: Aggregation, f: &dyn Fn(&CellResult) -> f64| {
        mean(
            grid_b2
                .results()
                .filter(|r| r.key.aggregation.0 == agg)
                .map(f),
        )
    };
    let test = |r: &CellResult| r.target_mar.unwrap_or(f64::NAN);
    let val = |r: &CellResult| r.best_val_mar.unwrap_or(f64::NAN);
    let tuned = mus
        .iter()
        .copied()
        .max_by(|a, b| {
            stat(Aggregation::FedProx { mu: *a }, &val)
                .total_cmp(&stat(Aggregation::FedProx { mu: *b }, &val))
        })
        .unwrap();
    let fedavg = stat(Aggregation::FedAvg, &test);
    let fedprox = stat(Aggregation::FedProx { mu: tuned }, &test);
    let fedetf = stat(Aggregation::FedEtf, &test);
    let line = format!(
        "(e) FedAvg {:.1}, FedProx(mu={tuned}) {:.1}, FedETF {:.1}",
        100.0 * fedavg,
        100.0 * fedprox,
        100.0 * fedetf
    );
    if (fedprox - fedavg).abs() > 0.03 || (fedetf - fedavg).abs() > 0.03 {
        failures.push(line.clone());
    }
    lines.push(line);

    let elapsed = start.elapsed();
    if elapsed > Duration::from_secs(600) {
        failures.push(format!("took {elapsed:?}"));
    }
    if failures.is_empty() {
        Ok(format!(
            "{} in {:.0}s",
            lines.join("; "),
            elapsed.as_secs_f64()
        ))
    } else {
        Err(format!(
            "{} | all: {}",
            failures.join("; "),
            lines.join("; ")
        ))
    }
}

/// Mean recall of the three rarest source classes, with and without
/// class-balanced batches, over 3 split seeds x 3 training seeds.
fn minority_recall() -> Result<(usize, String), String> {
    let spec = SynthSpec::new(64, 10, 0.5, 0.25, 0);
    let pool = generate_synthetic(&spec.with_seed(1), &[300; 10]).map_err(|e| e.to_string())?;
    let mut wins = 0;
    let mut gaps = Vec::new();
    for split_seed in 0..3u64 {
        let profile = ImbalanceProfile::LongTail {
            ratio: 50.0,
            class_order_seed: split_seed,
        };
        let split =
            make_source_split(&pool, &profile, 0.6, split_seed).map_err(|e| e.to_string())?;
        let eval = held_out(&pool, &[&split.train_indices, &split.val_indices]);
        let counts = split.train.class_counts();
        let mut order: Vec<usize> = (0..counts.len()).collect();
        order.sort_by_key(|&c| (counts[c], c));
        let rare = &order[..3];
        for train_seed in 0..3u64 {
            let recall = |balanced: bool| -> Result<f64, String> {
                let cfg = SourceConfig {
                    balanced_sampling: balanced,
                    seed: train_seed,
                    ..SourceConfig::default()
                };
                let (head, _) =
                    train_source(&split.train, &split.val, &cfg).map_err(|e| e.to_string())?;
                let r = per_class_recall(&head, &eval).map_err(|e| e.to_string())?;
                Ok(mean(rare.iter().map(|&c| r[c].unwrap_or(0.0))))
            };
            let (plain, balanced) = (recall(false)?, recall(true)?);
            gaps.push(100.0 * (balanced - plain));
            if balanced > plain {
                wins += 1;
            }
        }
    }
    Ok((
        wins,
        format!("mean minority recall gain {:.1} points", mean(gaps)),
    ))
}

fn label_hygiene() -> Check {
    let mut runs = 0;
    for seed in 0..2 {
        let (plan, source) = toy_plan(3, 0.5, seed);
        let etf_source = {
            let cfg = SourceConfig {
                epochs: 5,
                bottleneck_dim: 32,
                classifier_mode: ClassifierMode::EtfFixed,
                seed,
                ..SourceConfig::default()
            };
            train_source(&plan.source.train, &plan.source.val, &cfg)
                .map_err(|e| e.to_string())?
                .0
        };
        for method in [
            SfdaMethod::Shot,
            SfdaMethod::Nrc,
            SfdaMethod::Aad,
            SfdaMethod::Isfda,
            SfdaMethod::Hard,
            SfdaMethod::LocalOnly,
            SfdaMethod::SourceOnly,
        ] {
            for agg in [
                Aggregation::FedAvg,
                Aggregation::FedProx { mu: 0.01 },
                Aggregation::FedEtf,
            ] {
                let head = if agg == Aggregation::FedEtf {
                    &etf_source
                } else {
                    &source
                };
                let cfg = small_fed(method, agg, seed);
                run_adaptation(&plan, head, &cfg, &RayonRunner)
                    .map_err(|e| format!("{}: {e}", method.name()))?;
                runs += 1;
            }
        }
        let reads = plan.target.label_reads();
        ensure(reads == 0, || {
            format!("seed {seed}: {reads} target-train label reads")
        })?;
    }

    // the grid path checks its own counter per cell and fails the cell otherwise
    let mut cfg = grid_config(30.0, vec![1.0], vec![AggregationSpec(Aggregation::FedAvg)]);
    cfg.grid.methods = [
        "shot",
        "nrc",
        "aad",
        "isfda",
        "hard",
        "local-only",
        "source-only",
    ]
    .iter()
    .map(|m| MethodSpec(SfdaMethod::parse(m).unwrap()))
    .collect();
    cfg.grid.source_seeds = vec![0];
    cfg.grid.target_seeds = vec![0];
    cfg.federation.rounds = 2;
    cfg.federation.local_epochs = 1;
    let out = checked_grid(&cfg)?;
    Ok(format!(
        "0 reads over {runs} direct runs and {} grid cells",
        out.results().count()
    ))
}
