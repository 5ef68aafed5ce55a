//! Grid execution: generate or load domains, partition, train the source
//! head, adapt it federatedly and score every stage.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Context;
use ciffreeda_core::costs::analytic_head_flops;
use ciffreeda_core::federation::{run_adaptation, AdaptationResult, ClientRunner, SfdaMethod};
use ciffreeda_core::metrics::{evaluate_mar, s2t_diff};
use ciffreeda_core::partition::{
    make_shared_source_split, make_source_split, PartitionArgs, PartitionPlan,
};
use ciffreeda_core::rng::derive_seed;
use ciffreeda_core::source::{train_source, SourceReport};
use ciffreeda_core::synth::{generate_synthetic, AffineTransform, SynthSpec};
use ciffreeda_core::{FeatureDataset, HeadParams};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{
    AggregationSpec, ClassifierKind, DataSource, ExperimentConfig, MethodSpec, Scenario, Setting,
    Shift, SyntheticData,
};
use crate::io;
use crate::runner::RayonRunner;

const SOURCE_TRAIN_TAG: u64 = 0x5EED_0001;
const ADAPT_TAG: u64 = 0x5EED_0002;

/// Source and target pools of one grid model.
#[derive(Debug, Clone)]
pub struct Domains {
    pub model: String,
    pub separability: Option<f64>,
    pub source: FeatureDataset,
    pub target: FeatureDataset,
    pub shared: bool,
}

pub fn synthetic_domains(
    s: &SyntheticData,
    separability: f64,
    setting: Setting,
) -> anyhow::Result<Domains> {
    let base = SynthSpec::new(s.dim, s.classes, separability, s.sigma, s.means_seed);
    let counts = vec![s.per_class; s.classes];
    let source = generate_synthetic(
        &base
            .clone()
            .with_seed(s.source_sample_seed)
            .with_domain("source"),
        &counts,
    )?;
    let (target, shared) = match setting {
        Setting::Tl => (source.clone(), true),
        Setting::Da => {
            let angle = s.rotation_deg.to_radians();
            let shift = match s.shift {
                Shift::RandomPlanes => AffineTransform::rotation(s.dim, angle, s.means_seed),
                Shift::ClassPlanes => {
                    AffineTransform::class_plane_rotation(&base.class_means, angle, s.means_seed)?
                }
            };
            let spec = base
                .with_seed(s.target_sample_seed)
                .with_transform(shift)
                .with_domain("target");
            (generate_synthetic(&spec, &counts)?, false)
        }
    };
    Ok(Domains {
        model: format!("sep{separability}"),
        separability: Some(separability),
        source,
        target,
        shared,
    })
}

pub fn load_domains(cfg: &ExperimentConfig) -> anyhow::Result<Vec<Domains>> {
    match &cfg.data {
        DataSource::Synthetic(s) => cfg
            .grid
            .separabilities
            .iter()
            .map(|&sep| synthetic_domains(s, sep, cfg.setting))
            .collect(),
        DataSource::Files { source, target } => {
            let src = io::read_fedf(source)?;
            let (tgt, shared) = match cfg.setting {
                Setting::Tl => (src.clone(), true),
                Setting::Da => (io::read_fedf(target)?, false),
            };
            Ok(vec![Domains {
                model: String::from("features"),
                separability: None,
                source: src,
                target: tgt,
                shared,
            }])
        }
    }
}

/// Records of the source pool the source split did not take.
pub fn held_out(pool: &FeatureDataset, taken: &[&[usize]]) -> FeatureDataset {
    let mut used = vec![false; pool.len()];
    taken
        .iter()
        .flat_map(|t| t.iter())
        .for_each(|&i| used[i] = true);
    let rest: Vec<usize> = (0..pool.len()).filter(|&i| !used[i]).collect();
    pool.subset(&rest)
}

#[derive(Debug, Clone)]
pub struct SourcePhase {
    pub head: HeadParams,
    pub report: SourceReport,
    /// MAR on the source records left out of the source split.
    pub source_mar: Option<f64>,
}

pub fn source_phase(
    cfg: &ExperimentConfig,
    domains: &Domains,
    scenario: Scenario,
    classifier: ClassifierKind,
    source_seed: u64,
) -> anyhow::Result<SourcePhase> {
    let profile = cfg.source_profile(scenario, source_seed);
    let split = if domains.shared {
        make_shared_source_split(
            &domains.source,
            &profile,
            cfg.partition.take_fraction,
            source_seed,
        )?
    } else {
        make_source_split(
            &domains.source,
            &profile,
            cfg.partition.take_fraction,
            source_seed,
        )?
    };
    let scfg = cfg
        .source
        .to_core(classifier, derive_seed(source_seed, &[SOURCE_TRAIN_TAG]));
    let (head, report) = train_source(&split.train, &split.val, &scfg)?;
    let eval = held_out(&domains.source, &[&split.train_indices, &split.val_indices]);
    let source_mar = evaluate_mar(&head, &eval)?;
    Ok(SourcePhase {
        head,
        report,
        source_mar,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellKey {
    pub model: String,
    pub setting: Setting,
    pub scenario: Scenario,
    pub method: MethodSpec,
    pub aggregation: AggregationSpec,
    pub source_seed: u64,
    pub target_seed: u64,
}

impl CellKey {
    /// Directory name built from the coordinates.
    pub fn dir_name(&self) -> String {
        format!(
            "{}_{}_{}_{}_{}_s{}_t{}",
            self.model,
            self.setting.tag(),
            self.scenario.tag(),
            self.method.0.name(),
            self.aggregation.tag(),
            self.source_seed,
            self.target_seed
        )
        .replace([':', '/'], "-")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    #[serde(flatten)]
    pub key: CellKey,
    pub separability: Option<f64>,
    pub source_val_mar: f64,
    pub source_mar: Option<f64>,
    /// The source head on the target test set.
    pub source_only_target_mar: Option<f64>,
    /// The selected adapted model on the target test set.
    pub target_mar: Option<f64>,
    /// Target minus source, percentage points.
    pub s2t_diff: Option<f64>,
    /// Pooled client validation MAR of the selected round.
    pub best_val_mar: Option<f64>,
    pub best_round: usize,
    pub bytes_total: u64,
    pub head_forward_flops: f64,
}

pub struct CellOutput {
    pub result: CellResult,
    pub adaptation: AdaptationResult,
    pub plan: PartitionPlan,
}

pub fn run_cell(
    cfg: &ExperimentConfig,
    domains: &Domains,
    key: &CellKey,
    source: &SourcePhase,
    runner: &dyn ClientRunner,
) -> anyhow::Result<CellOutput> {
    let args = PartitionArgs {
        source_profile: cfg.source_profile(key.scenario, key.source_seed),
        take_fraction: cfg.partition.take_fraction,
        clients: cfg.partition.clients,
        alpha: cfg.target_alpha(key.scenario),
        test_fraction: cfg.partition.test_fraction,
        source_seed: key.source_seed,
        target_seed: key.target_seed,
    };
    let plan = PartitionPlan::build(&domains.source, &domains.target, domains.shared, &args)?;
    let fed = cfg.federation.to_core(
        key.aggregation.0,
        key.method.0,
        derive_seed(key.source_seed, &[ADAPT_TAG, key.target_seed]),
    );
    let adaptation = run_adaptation(&plan, &source.head, &fed, runner)?;
    let reads = plan.target.label_reads();
    anyhow::ensure!(reads == 0, "adaptation read {reads} target training labels");
    let source_only_target_mar = evaluate_mar(&source.head, &plan.target.test)?;
    let target_mar = adaptation.test_mar;
    let head = &source.head;
    let result = CellResult {
        key: key.clone(),
        separability: domains.separability,
        source_val_mar: source.report.best_val_mar,
        source_mar: source.source_mar,
        source_only_target_mar,
        target_mar,
        s2t_diff: source
            .source_mar
            .zip(target_mar)
            .map(|(s, t)| s2t_diff(s, t)),
        best_val_mar: adaptation
            .history
            .iter()
            .find(|l| l.round == adaptation.best_round)
            .and_then(|l| l.aggregated_val_mar),
        best_round: adaptation.best_round,
        bytes_total: adaptation.history.iter().map(|l| l.bytes).sum(),
        head_forward_flops: analytic_head_flops(head.in_dim, head.num_classes)
            * head.bottleneck_dim as f64
            / ciffreeda_core::head::DEFAULT_BOTTLENECK as f64,
    };
    Ok(CellOutput {
        result,
        adaptation,
        plan,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    #[serde(flatten)]
    pub key: CellKey,
    pub result: Option<CellResult>,
    pub error: Option<String>,
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub setting: String,
    pub scenario: String,
    pub model: String,
    pub method: String,
    pub aggregation: String,
    pub runs: usize,
    pub failures: usize,
    pub mar_mean: Option<f64>,
    pub mar_min: Option<f64>,
    pub mar_max: Option<f64>,
    pub source_mar_mean: Option<f64>,
    pub source_mar_min: Option<f64>,
    pub source_mar_max: Option<f64>,
    pub source_only_mar_mean: Option<f64>,
    pub s2t_diff_mean: Option<f64>,
    pub s2t_diff_min: Option<f64>,
    pub s2t_diff_max: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct GridOutcome {
    pub cells: Vec<CellRecord>,
    pub summary: Vec<SummaryRow>,
}

impl GridOutcome {
    pub fn failures(&self) -> usize {
        self.cells.iter().filter(|c| c.error.is_some()).count()
    }

    pub fn diverged(&self) -> bool {
        self.cells.iter().any(|c| c.diverged)
    }

    pub fn results(&self) -> impl Iterator<Item = &CellResult> {
        self.cells.iter().filter_map(|c| c.result.as_ref())
    }
}

pub fn is_divergence(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        matches!(
            e.downcast_ref::<ciffreeda_core::Error>(),
            Some(ciffreeda_core::Error::Diverged { .. })
        )
    })
}

/// Mean, min and max of the present values.
pub fn spread(
    values: impl IntoIterator<Item = Option<f64>>,
) -> (Option<f64>, Option<f64>, Option<f64>) {
    let v: Vec<f64> = values.into_iter().flatten().collect();
    if v.is_empty() {
        return (None, None, None);
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (Some(mean), Some(min), Some(max))
}

pub fn summarize(cfg: &ExperimentConfig, cells: &[CellRecord]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(usize, usize, usize, usize), Vec<&CellRecord>> = BTreeMap::new();
    let pos = |v: &[String], s: &str| v.iter().position(|x| x == s).unwrap_or(usize::MAX);
    let models: Vec<String> =
        cells
            .iter()
            .map(|c| c.key.model.clone())
            .fold(Vec::new(), |mut acc, m| {
                if !acc.contains(&m) {
                    acc.push(m);
                }
                acc
            });
    let scenarios: Vec<String> = cfg.grid.scenarios.iter().map(Scenario::tag).collect();
    let methods: Vec<String> = cfg
        .grid
        .methods
        .iter()
        .map(|m| m.0.name().to_string())
        .collect();
    let aggs: Vec<String> = cfg
        .grid
        .aggregations
        .iter()
        .map(AggregationSpec::tag)
        .collect();
    for c in cells {
        let k = &c.key;
        groups
            .entry((
                pos(&scenarios, &k.scenario.tag()),
                pos(&models, &k.model),
                pos(&methods, k.method.0.name()),
                pos(&aggs, &k.aggregation.tag()),
            ))
            .or_default()
            .push(c);
    }
    groups
        .into_values()
        .map(|group| {
            let k = &group[0].key;
            let ok: Vec<&CellResult> = group.iter().filter_map(|c| c.result.as_ref()).collect();
            let (mar_mean, mar_min, mar_max) = spread(ok.iter().map(|r| r.target_mar));
            let (source_mar_mean, source_mar_min, source_mar_max) =
                spread(ok.iter().map(|r| r.source_mar));
            let (s2t_diff_mean, s2t_diff_min, s2t_diff_max) = spread(ok.iter().map(|r| r.s2t_diff));
            SummaryRow {
                setting: k.setting.tag().into(),
                scenario: k.scenario.tag(),
                model: k.model.clone(),
                method: k.method.0.name().into(),
                aggregation: k.aggregation.tag(),
                runs: ok.len(),
                failures: group.len() - ok.len(),
                mar_mean,
                mar_min,
                mar_max,
                source_mar_mean,
                source_mar_min,
                source_mar_max,
                source_only_mar_mean: spread(ok.iter().map(|r| r.source_only_target_mar)).0,
                s2t_diff_mean,
                s2t_diff_min,
                s2t_diff_max,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct RunRow<'a> {
    setting: &'a str,
    scenario: String,
    model: &'a str,
    method: &'a str,
    aggregation: String,
    source_seed: u64,
    target_seed: u64,
    mar: Option<f64>,
    source_mar: Option<f64>,
    source_only_mar: Option<f64>,
    s2t_diff: Option<f64>,
    best_round: usize,
    bytes_total: u64,
}

pub fn write_csvs(dir: &Path, outcome: &GridOutcome) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in &outcome.summary {
        w.serialize(row)?;
    }
    io::write_atomic(&dir.join("summary.csv"), &w.into_inner()?)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in outcome.results() {
        w.serialize(RunRow {
            setting: r.key.setting.tag(),
            scenario: r.key.scenario.tag(),
            model: &r.key.model,
            method: r.key.method.0.name(),
            aggregation: r.key.aggregation.tag(),
            source_seed: r.key.source_seed,
            target_seed: r.key.target_seed,
            mar: r.target_mar,
            source_mar: r.source_mar,
            source_only_mar: r.source_only_target_mar,
            s2t_diff: r.s2t_diff,
            best_round: r.best_round,
            bytes_total: r.bytes_total,
        })?;
    }
    io::write_atomic(&dir.join("runs.csv"), &w.into_inner()?)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct SourceKey {
    model: usize,
    source_imbalanced: bool,
    etf: bool,
    source_seed: u64,
}

/// Runs every cell of the grid. Failed cells are recorded and the rest still
/// run. With `out` set, per-cell artifacts and the CSVs are written there.
pub fn run_grid(cfg: &ExperimentConfig, out: Option<&Path>) -> anyhow::Result<GridOutcome> {
    cfg.validate()?;
    let domains = load_domains(cfg)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .context("building worker pool")?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        io::write_json(&dir.join("config.json"), cfg)?;
    }

    let g = &cfg.grid;
    let mut keys = Vec::new();
    for (m, d) in domains.iter().enumerate() {
        for &scenario in &g.scenarios {
            for &method in &g.methods {
                for &aggregation in &g.aggregations {
                    for &source_seed in &g.source_seeds {
                        for &target_seed in &g.target_seeds {
                            keys.push((
                                m,
                                CellKey {
                                    model: d.model.clone(),
                                    setting: cfg.setting,
                                    scenario,
                                    method,
                                    aggregation,
                                    source_seed,
                                    target_seed,
                                },
                            ));
                        }
                    }
                }
            }
        }
    }
    let source_key = |m: usize, k: &CellKey| SourceKey {
        model: m,
        source_imbalanced: k.scenario.source_imbalanced,
        etf: k.aggregation.classifier() == ClassifierKind::Etf,
        source_seed: k.source_seed,
    };
    let mut needed: Vec<SourceKey> = keys.iter().map(|(m, k)| source_key(*m, k)).collect();
    needed.sort();
    needed.dedup();

    let sources: BTreeMap<SourceKey, Result<SourcePhase, String>> = pool.install(|| {
        needed
            .par_iter()
            .map(|sk| {
                let scenario = Scenario::new(sk.source_imbalanced, false);
                let kind = if sk.etf {
                    ClassifierKind::Etf
                } else {
                    ClassifierKind::Trainable
                };
                let phase = source_phase(cfg, &domains[sk.model], scenario, kind, sk.source_seed)
                    .map_err(|e| format!("{e:#}"));
                (*sk, phase)
            })
            .collect()
    });

    let cells: Vec<CellRecord> = pool.install(|| {
        keys.par_iter()
            .map(|(m, key)| {
                let source = &sources[&source_key(*m, key)];
                let outcome = match source {
                    Ok(phase) => {
                        run_cell(cfg, &domains[*m], key, phase, &RayonRunner).and_then(|o| {
                            if let Some(dir) = out {
                                write_cell(&dir.join(key.dir_name()), cfg, &o, phase)?;
                            }
                            Ok(o.result)
                        })
                    }
                    Err(msg) => Err(anyhow::anyhow!("source training failed: {msg}")),
                };
                match outcome {
                    Ok(result) => CellRecord {
                        key: key.clone(),
                        result: Some(result),
                        error: None,
                        diverged: false,
                    },
                    Err(e) => {
                        log::error!("cell {} failed: {e:#}", key.dir_name());
                        let diverged = is_divergence(&e)
                            || matches!(source, Err(msg) if msg.contains("diverged"));
                        CellRecord {
                            key: key.clone(),
                            result: None,
                            error: Some(format!("{e:#}")),
                            diverged,
                        }
                    }
                }
            })
            .collect()
    });
    let summary = summarize(cfg, &cells);
    let outcome = GridOutcome { cells, summary };
    if let Some(dir) = out {
        for c in outcome.cells.iter().filter(|c| c.error.is_some()) {
            io::write_json(&dir.join(c.key.dir_name()).join("result.json"), c)?;
        }
        write_csvs(dir, &outcome)?;
    }
    Ok(outcome)
}

fn write_cell(
    dir: &Path,
    cfg: &ExperimentConfig,
    out: &CellOutput,
    source: &SourcePhase,
) -> anyhow::Result<()> {
    let record = CellRecord {
        key: out.result.key.clone(),
        result: Some(out.result.clone()),
        error: None,
        diverged: false,
    };
    io::write_json(&dir.join("result.json"), &record)?;
    io::write_history(&dir.join("history.jsonl"), &out.adaptation.history)?;
    io::write_json(
        &dir.join("source_report.json"),
        &io::source_rows(&source.report),
    )?;
    if cfg.save_heads {
        io::write_head(&dir.join("source_head.bin"), &source.head)?;
        io::write_head(&dir.join("global_head.bin"), &out.adaptation.best_global)?;
        if let Some(heads) = &out.adaptation.client_heads {
            for (k, h) in heads.iter().enumerate() {
                io::write_head(&dir.join(format!("client{k}_head.bin")), h)?;
            }
        }
    }
    Ok(())
}

/// Output directory of a cell below `root`.
pub fn cell_dir(root: &Path, key: &CellKey) -> PathBuf {
    root.join(key.dir_name())
}

/// Whether `method` produces a server model worth saving.
pub fn has_global(method: SfdaMethod) -> bool {
    !matches!(method, SfdaMethod::LocalOnly | SfdaMethod::SourceOnly)
}
