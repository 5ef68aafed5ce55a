//! Command-line front end.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use ciffreeda_core::costs::{cost_report, CostLedger, ModelKind, TrainMode};
use ciffreeda_core::federation::{run_adaptation, Aggregation, SerialRunner, SfdaMethod};
use ciffreeda_core::metrics::{evaluate, macro_recall};
use ciffreeda_core::partition::{PartitionArgs, PartitionPlan, PlanIndices};
use ciffreeda_core::source::train_source;
use ciffreeda_core::synth::{generate_synthetic, AffineTransform, SynthSpec};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::config::{
    AggregationSpec, ClassifierKind, ExperimentConfig, FederationSection, MethodSpec,
    PartitionSection, Scenario, Setting, SourceSection,
};
use crate::io;
use crate::pipeline::{self, is_divergence};
use crate::runner::RayonRunner;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

/// Invalid arguments detected after parsing.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Debug, Parser)]
#[command(
    name = "ciffreeda",
    version,
    about = "Class-imbalanced federated source-free domain adaptation simulator"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw a synthetic feature set and write it as FEDF.
    Synth(SynthArgs),
    /// Split source and target sets into source train/val, target test and client shards.
    Partition(PartitionCmd),
    /// Train a head on labeled source features.
    TrainSource(TrainSourceArgs),
    /// Federated source-free adaptation of a source head.
    Adapt(AdaptArgs),
    /// Print the macro-averaged recall of a head on a feature set.
    Evaluate(EvaluateArgs),
    /// Per-image training FLOPs and communication volume.
    Costs(CostsArgs),
    /// Run an experiment grid from a JSON config.
    Grid(GridArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ShiftArg {
    RandomPlanes,
    ClassPlanes,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    #[arg(long, default_value_t = 150)]
    pub per_class: usize,
    /// Seed of the sample draws.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Seed of the class means; domains sharing it share their classes.
    #[arg(long)]
    pub means_seed: Option<u64>,
    #[arg(long, default_value_t = 1.0)]
    pub separability: f64,
    #[arg(long, default_value_t = 0.25)]
    pub sigma: f64,
    /// Domain shift angle in degrees; 0 leaves the domain unshifted.
    #[arg(long, default_value_t = 0.0)]
    pub rotation_deg: f64,
    #[arg(long, value_enum, default_value_t = ShiftArg::ClassPlanes)]
    pub shift: ShiftArg,
    #[arg(long, default_value = "synthetic")]
    pub domain: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PartitionCmd {
    #[arg(long)]
    pub source: PathBuf,
    /// Target set; omit for transfer learning within the source set.
    #[arg(long)]
    pub target: Option<PathBuf>,
    #[arg(long, default_value = "siti")]
    pub scenario: String,
    #[arg(long, default_value_t = 3)]
    pub clients: usize,
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
    #[arg(long, default_value_t = 10.0)]
    pub source_ratio: f64,
    #[arg(long, default_value_t = 0.6)]
    pub take_fraction: f64,
    #[arg(long, default_value_t = 0.2)]
    pub test_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub source_seed: u64,
    #[arg(long, default_value_t = 0)]
    pub target_seed: u64,
    /// Directory receiving plan.json and one FEDF file per split.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainSourceArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub val: PathBuf,
    /// JSON experiment config whose `source` section provides defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub label_smoothing: Option<f64>,
    #[arg(long)]
    pub bottleneck: Option<usize>,
    /// Class-balanced batches.
    #[arg(long)]
    pub balanced: bool,
    /// Fixed simplex ETF classifier.
    #[arg(long)]
    pub etf: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch JSON report.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AdaptArgs {
    /// Directory written by `partition`.
    #[arg(long)]
    pub plan: PathBuf,
    #[arg(long)]
    pub head: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "shot")]
    pub method: String,
    #[arg(long, default_value = "fedavg")]
    pub aggregation: String,
    #[arg(long)]
    pub rounds: Option<usize>,
    #[arg(long)]
    pub local_epochs: Option<usize>,
    #[arg(long)]
    pub mu: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Run clients on the thread pool.
    #[arg(long)]
    pub parallel: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub head: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Also print the confusion matrix to the diagnostic stream.
    #[arg(long)]
    pub confusion: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Finetune,
    Frozen,
    Skipped,
}

#[derive(Debug, Args)]
pub struct CostsArgs {
    /// resnet50, resnet101, vit_s, vit_b, head_only_vit_s, head_only_vit_b or synthetic.
    #[arg(long)]
    pub model: String,
    #[arg(long, value_enum, default_value_t = ModeArg::Frozen)]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 10)]
    pub rounds: usize,
    #[arg(long, default_value_t = 3)]
    pub clients: usize,
    /// Input width of a synthetic head.
    #[arg(long, default_value_t = 64)]
    pub in_dim: usize,
    /// Classes of a synthetic head.
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    /// JSON experiment config; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Concurrent grid cells; 0 uses every core.
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub setting: Option<String>,
    /// Comma-separated scenario tags.
    #[arg(long, value_delimiter = ',')]
    pub scenarios: Option<Vec<String>>,
    /// Comma-separated adaptation methods.
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<String>>,
    /// Comma-separated aggregation rules.
    #[arg(long, value_delimiter = ',')]
    pub aggregations: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    pub separabilities: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub source_seeds: Option<Vec<u64>>,
    #[arg(long, value_delimiter = ',')]
    pub target_seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub rounds: Option<usize>,
    #[arg(long)]
    pub local_epochs: Option<usize>,
    #[arg(long)]
    pub source_epochs: Option<usize>,
    #[arg(long)]
    pub save_heads: bool,
}

/// Partition parameters and index lists, enough to rebuild a plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanFile {
    pub source: PathBuf,
    pub target: PathBuf,
    pub shared_domain: bool,
    pub scenario: Scenario,
    pub alpha: f64,
    pub source_seed: u64,
    pub target_seed: u64,
    pub source_train: Vec<usize>,
    pub source_val: Vec<usize>,
    pub target_test: Vec<usize>,
    pub client_train: Vec<Vec<usize>>,
    pub client_val: Vec<Vec<usize>>,
}

impl PlanFile {
    pub fn indices(&self) -> PlanIndices {
        PlanIndices {
            source_train: self.source_train.clone(),
            source_val: self.source_val.clone(),
            target_test: self.target_test.clone(),
            client_train: self.client_train.clone(),
            client_val: self.client_val.clone(),
        }
    }
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Partition(a) => partition(a),
        Command::TrainSource(a) => train_source_cmd(a),
        Command::Adapt(a) => adapt(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Costs(a) => costs(a),
        Command::Grid(a) => grid(a),
    }
}

/// Maps an error to the process exit code.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err
        .chain()
        .any(|e| e.downcast_ref::<UsageError>().is_some())
    {
        EXIT_USAGE
    } else if is_divergence(err) {
        EXIT_DIVERGED
    } else {
        EXIT_DATA
    }
}

fn synth(a: SynthArgs) -> anyhow::Result<()> {
    if a.classes == 0 || a.dim == 0 || a.per_class == 0 {
        return Err(usage("--dim, --classes and --per-class must be positive"));
    }
    let means_seed = a.means_seed.unwrap_or(a.seed);
    let mut spec = SynthSpec::new(a.dim, a.classes, a.separability, a.sigma, means_seed)
        .with_seed(a.seed)
        .with_domain(a.domain);
    if a.rotation_deg != 0.0 {
        let angle = a.rotation_deg.to_radians();
        let t = match a.shift {
            ShiftArg::RandomPlanes => AffineTransform::rotation(a.dim, angle, means_seed),
            ShiftArg::ClassPlanes => {
                AffineTransform::class_plane_rotation(&spec.class_means, angle, means_seed)?
            }
        };
        spec = spec.with_transform(t);
    }
    spec.validate().map_err(|e| usage(e.to_string()))?;
    let data = generate_synthetic(&spec, &vec![a.per_class; a.classes])?;
    io::write_fedf(&a.out, &data)?;
    log::info!("wrote {} records to {}", data.len(), a.out.display());
    Ok(())
}

fn parse_scenario(s: &str) -> anyhow::Result<Scenario> {
    Scenario::try_from(s.to_string()).map_err(usage)
}

fn partition(a: PartitionCmd) -> anyhow::Result<()> {
    let scenario = parse_scenario(&a.scenario)?;
    let section = PartitionSection {
        clients: a.clients,
        alpha: a.alpha,
        take_fraction: a.take_fraction,
        test_fraction: a.test_fraction,
        source_ratio: a.source_ratio,
    };
    let cfg = ExperimentConfig {
        partition: section,
        ..ExperimentConfig::default()
    };
    if a.clients == 0 || !(a.source_ratio > 1.0) || !(a.alpha > 0.0) {
        return Err(usage(
            "--clients must be positive, --source-ratio above 1 and --alpha positive",
        ));
    }
    let src = io::read_fedf(&a.source)?;
    let (tgt, shared, target_path) = match &a.target {
        Some(p) => (io::read_fedf(p)?, false, p.clone()),
        None => (src.clone(), true, a.source.clone()),
    };
    let args = PartitionArgs {
        source_profile: cfg.source_profile(scenario, a.source_seed),
        take_fraction: a.take_fraction,
        clients: a.clients,
        alpha: cfg.target_alpha(scenario),
        test_fraction: a.test_fraction,
        source_seed: a.source_seed,
        target_seed: a.target_seed,
    };
    let plan = PartitionPlan::build(&src, &tgt, shared, &args)?;
    let idx = plan.indices();
    let file = PlanFile {
        source: absolute(&a.source),
        target: absolute(&target_path),
        shared_domain: shared,
        scenario,
        alpha: a.alpha,
        source_seed: a.source_seed,
        target_seed: a.target_seed,
        source_train: idx.source_train,
        source_val: idx.source_val,
        target_test: idx.target_test,
        client_train: idx.client_train,
        client_val: idx.client_val,
    };
    io::write_json(&a.out.join("plan.json"), &file)?;
    io::write_fedf(&a.out.join("source_train.fedf"), &plan.source.train)?;
    io::write_fedf(&a.out.join("source_val.fedf"), &plan.source.val)?;
    io::write_fedf(&a.out.join("test.fedf"), &plan.target.test)?;
    for c in plan.clients() {
        io::write_fedf(
            &a.out.join(format!("client{}_val.fedf", c.client_id)),
            &c.val,
        )?;
    }
    log::info!(
        "source {}+{}, test {}, clients {:?}",
        plan.source.train.len(),
        plan.source.val.len(),
        plan.target.test.len(),
        plan.clients()
            .iter()
            .map(|c| c.train_len())
            .collect::<Vec<_>>()
    );
    Ok(())
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

fn config_or_default(path: Option<&Path>) -> anyhow::Result<ExperimentConfig> {
    match path {
        Some(p) => {
            let text =
                std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            ExperimentConfig::from_json(&text).map_err(|e| usage(format!("{e:#}")))
        }
        None => Ok(ExperimentConfig::default()),
    }
}

fn train_source_cmd(a: TrainSourceArgs) -> anyhow::Result<()> {
    let base = config_or_default(a.config.as_deref())?;
    let s = SourceSection {
        epochs: a.epochs.unwrap_or(base.source.epochs),
        batch_size: a.batch_size.unwrap_or(base.source.batch_size),
        learning_rate: a.lr.unwrap_or(base.source.learning_rate),
        weight_decay: a.weight_decay.unwrap_or(base.source.weight_decay),
        label_smoothing: a.label_smoothing.unwrap_or(base.source.label_smoothing),
        bottleneck_dim: a.bottleneck.unwrap_or(base.source.bottleneck_dim),
        balanced_sampling: a.balanced || base.source.balanced_sampling,
        ..base.source
    };
    let kind = if a.etf {
        ClassifierKind::Etf
    } else {
        ClassifierKind::Trainable
    };
    let cfg = s.to_core(kind, a.seed);
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let train = io::read_fedf(&a.train)?;
    let val = io::read_fedf(&a.val)?;
    let (head, report) = train_source(&train, &val, &cfg)?;
    io::write_head(&a.out, &head)?;
    if let Some(p) = &a.report {
        io::write_json(p, &io::source_rows(&report))?;
    }
    log::info!(
        "best val MAR {:.4} at epoch {}",
        report.best_val_mar,
        report.best_epoch
    );
    Ok(())
}

fn adapt(a: AdaptArgs) -> anyhow::Result<()> {
    let base = config_or_default(a.config.as_deref())?;
    let method = SfdaMethod::parse(&a.method).map_err(|e| usage(e.to_string()))?;
    let mut aggregation = AggregationSpec::try_from(a.aggregation.clone())
        .map_err(usage)?
        .0;
    if let (Aggregation::FedProx { .. }, Some(mu)) = (aggregation, a.mu) {
        aggregation = Aggregation::FedProx { mu };
    }
    let fed_section = FederationSection {
        rounds: a.rounds.unwrap_or(base.federation.rounds),
        local_epochs: a.local_epochs.unwrap_or(base.federation.local_epochs),
        ..base.federation
    };
    let fed = fed_section.to_core(aggregation, method, a.seed);
    fed.validate().map_err(|e| usage(e.to_string()))?;

    let plan_file: PlanFile = io::read_json(&a.plan.join("plan.json"))?;
    let src = io::read_fedf(&plan_file.source)?;
    let tgt = if plan_file.shared_domain {
        src.clone()
    } else {
        io::read_fedf(&plan_file.target)?
    };
    let plan = PartitionPlan::from_indices(
        &src,
        &tgt,
        &plan_file.indices(),
        plan_file.alpha,
        plan_file.source_seed,
        plan_file.target_seed,
    )?;
    let head = io::read_head(&a.head)?;
    let result = if a.parallel {
        run_adaptation(&plan, &head, &fed, &RayonRunner)?
    } else {
        run_adaptation(&plan, &head, &fed, &SerialRunner)?
    };
    let reads = plan.target.label_reads();
    anyhow::ensure!(reads == 0, "adaptation read {reads} target training labels");

    io::write_history(&a.out.join("history.jsonl"), &result.history)?;
    io::write_head(&a.out.join("global_head.bin"), &result.best_global)?;
    if let Some(heads) = &result.client_heads {
        for (k, h) in heads.iter().enumerate() {
            io::write_head(&a.out.join(format!("client{k}_head.bin")), h)?;
        }
    }
    let mut stdout = std::io::stdout().lock();
    writeln!(
        stdout,
        "best_round {} test_mar {}",
        result.best_round,
        result
            .test_mar
            .map_or_else(|| "none".to_string(), |m| format!("{m:.6}"))
    )?;
    Ok(())
}

fn evaluate_cmd(a: EvaluateArgs) -> anyhow::Result<()> {
    let head = io::read_head(&a.head)?;
    let data = io::read_fedf(&a.data)?;
    let cm = evaluate(&head, &data)?;
    let mar = macro_recall(&cm)?;
    if a.confusion {
        for row in cm.counts() {
            eprintln!(
                "{}",
                row.iter().map(u64::to_string).collect::<Vec<_>>().join(" ")
            );
        }
    }
    writeln!(std::io::stdout().lock(), "{mar:.6}")?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct CostOutput {
    model: String,
    mode: String,
    forward_flops_per_image: f64,
    train_flops_per_image: f64,
    bytes_per_transfer: u64,
    bytes_total: u64,
}

fn costs(a: CostsArgs) -> anyhow::Result<()> {
    let kind = if a.model == "synthetic" {
        ModelKind::Synthetic {
            in_dim: a.in_dim,
            num_classes: a.classes,
        }
    } else {
        ModelKind::parse(&a.model).map_err(|e| usage(e.to_string()))?
    };
    let mode = match a.mode {
        ModeArg::Finetune => TrainMode::FineTune,
        ModeArg::Frozen => TrainMode::Frozen,
        ModeArg::Skipped => TrainMode::Skipped,
    };
    let ledger =
        CostLedger::new(kind, mode, a.rounds, a.clients).map_err(|e| usage(e.to_string()))?;
    let r = cost_report(&ledger);
    let out = CostOutput {
        model: kind.name().into(),
        mode: format!("{:?}", ledger.mode).to_lowercase(),
        forward_flops_per_image: r.forward_flops_per_image,
        train_flops_per_image: r.train_flops_per_image,
        bytes_per_transfer: r.bytes_per_transfer,
        bytes_total: r.bytes_total,
    };
    let mut stdout = std::io::stdout().lock();
    if a.json {
        writeln!(stdout, "{}", serde_json::to_string_pretty(&out)?)?;
    } else {
        writeln!(stdout, "model {} ({})", out.model, out.mode)?;
        writeln!(
            stdout,
            "forward_flops_per_image {}",
            out.forward_flops_per_image
        )?;
        writeln!(
            stdout,
            "train_flops_per_image {}",
            out.train_flops_per_image
        )?;
        writeln!(stdout, "bytes_per_transfer {}", out.bytes_per_transfer)?;
        writeln!(stdout, "bytes_total {}", out.bytes_total)?;
    }
    Ok(())
}

/// Applies command-line overrides to a loaded config.
pub fn apply_overrides(cfg: &mut ExperimentConfig, a: &GridArgs) -> anyhow::Result<()> {
    if let Some(o) = &a.out {
        cfg.output_dir.clone_from(o);
    }
    if let Some(w) = a.workers {
        cfg.workers = w;
    }
    if let Some(s) = &a.setting {
        cfg.setting = match s.as_str() {
            "tl" => Setting::Tl,
            "da" => Setting::Da,
            other => {
                return Err(usage(format!(
                    "unknown setting {other:?}; expected tl or da"
                )))
            }
        };
    }
    if let Some(v) = &a.scenarios {
        cfg.grid.scenarios = v
            .iter()
            .map(|s| parse_scenario(s))
            .collect::<anyhow::Result<_>>()?;
    }
    if let Some(v) = &a.methods {
        cfg.grid.methods = v
            .iter()
            .map(|s| {
                SfdaMethod::parse(s)
                    .map(MethodSpec)
                    .map_err(|e| usage(e.to_string()))
            })
            .collect::<anyhow::Result<_>>()?;
    }
    if let Some(v) = &a.aggregations {
        cfg.grid.aggregations = v
            .iter()
            .map(|s| AggregationSpec::try_from(s.clone()).map_err(usage))
            .collect::<anyhow::Result<_>>()?;
    }
    if let Some(v) = &a.separabilities {
        cfg.grid.separabilities.clone_from(v);
    }
    if let Some(v) = &a.source_seeds {
        cfg.grid.source_seeds.clone_from(v);
    }
    if let Some(v) = &a.target_seeds {
        cfg.grid.target_seeds.clone_from(v);
    }
    if let Some(r) = a.rounds {
        cfg.federation.rounds = r;
    }
    if let Some(e) = a.local_epochs {
        cfg.federation.local_epochs = e;
    }
    if let Some(e) = a.source_epochs {
        cfg.source.epochs = e;
    }
    cfg.save_heads |= a.save_heads;
    cfg.validate().map_err(|e| usage(format!("{e:#}")))
}

fn grid(a: GridArgs) -> anyhow::Result<()> {
    let mut cfg = config_or_default(a.config.as_deref())?;
    apply_overrides(&mut cfg, &a)?;
    let out_dir = cfg.output_dir.clone();
    let outcome = pipeline::run_grid(&cfg, Some(&out_dir))?;
    let mut stdout = std::io::stdout().lock();
    for row in &outcome.summary {
        writeln!(
            stdout,
            "{} {} {} {} {}: MAR {} over {} runs",
            row.setting,
            row.scenario,
            row.model,
            row.method,
            row.aggregation,
            row.mar_mean
                .map_or_else(|| "n/a".into(), |m| format!("{m:.4}")),
            row.runs
        )?;
    }
    writeln!(
        stdout,
        "summary written to {}",
        out_dir.join("summary.csv").display()
    )?;
    match outcome.failures() {
        0 => Ok(()),
        n if outcome.diverged() => Err(anyhow!(ciffreeda_core::Error::Diverged {
            stage: format!("{n} grid cells failed"),
            loss: f64::NAN,
        })),
        n => Err(anyhow!("{n} grid cells failed")),
    }
}
