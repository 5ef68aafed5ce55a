//! Experiment configuration: a single JSON document, every field optional.

use std::path::PathBuf;

use anyhow::{bail, Context};
use ciffreeda_core::federation::{Aggregation, FedConfig, Selection, SfdaMethod};
use ciffreeda_core::head::{LrSchedule, DEFAULT_BOTTLENECK};
use ciffreeda_core::partition::ImbalanceProfile;
use ciffreeda_core::source::SourceConfig;
use ciffreeda_core::ClassifierMode;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SyntheticData),
    /// One FEDF file per domain. For transfer learning only `source` is read.
    Files {
        source: PathBuf,
        target: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shift {
    /// Every vector turns by the angle in random planes.
    RandomPlanes,
    /// Class means turn towards each other.
    ClassPlanes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticData {
    pub dim: usize,
    pub classes: usize,
    pub per_class: usize,
    pub sigma: f64,
    /// Domain shift angle in degrees.
    pub rotation_deg: f64,
    pub shift: Shift,
    pub means_seed: u64,
    pub source_sample_seed: u64,
    pub target_sample_seed: u64,
}

impl Default for SyntheticData {
    fn default() -> Self {
        Self {
            dim: 64,
            classes: 10,
            per_class: 150,
            sigma: 0.25,
            rotation_deg: 30.0,
            shift: Shift::ClassPlanes,
            means_seed: 0,
            source_sample_seed: 1,
            target_sample_seed: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    /// Source and target drawn from the same domain.
    Tl,
    /// Target drawn from a shifted domain.
    Da,
}

impl Setting {
    pub fn tag(&self) -> &'static str {
        match self {
            Self::Tl => "tl",
            Self::Da => "da",
        }
    }
}

/// Label-distribution scenario: source balanced or imbalanced, target
/// balanced (IID clients) or imbalanced (Dirichlet clients).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Scenario {
    pub source_imbalanced: bool,
    pub target_imbalanced: bool,
}

impl Scenario {
    pub const SBTB: Self = Self::new(false, false);
    pub const SITI: Self = Self::new(true, true);

    pub const fn new(source_imbalanced: bool, target_imbalanced: bool) -> Self {
        Self {
            source_imbalanced,
            target_imbalanced,
        }
    }

    pub fn tag(&self) -> String {
        format!(
            "s{}t{}",
            if self.source_imbalanced { 'i' } else { 'b' },
            if self.target_imbalanced { 'i' } else { 'b' }
        )
    }
}

impl TryFrom<String> for Scenario {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        match s.as_str() {
            "sbtb" => Ok(Self::new(false, false)),
            "sbti" => Ok(Self::new(false, true)),
            "sitb" => Ok(Self::new(true, false)),
            "siti" => Ok(Self::new(true, true)),
            other => Err(format!(
                "unknown scenario {other:?}; expected sbtb, sbti, sitb or siti"
            )),
        }
    }
}

impl From<Scenario> for String {
    fn from(s: Scenario) -> String {
        s.tag()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionSection {
    pub clients: usize,
    pub alpha: f64,
    pub take_fraction: f64,
    pub test_fraction: f64,
    /// Largest to smallest class ratio of imbalanced sources.
    pub source_ratio: f64,
}

impl Default for PartitionSection {
    fn default() -> Self {
        Self {
            clients: 3,
            alpha: 0.5,
            take_fraction: 0.6,
            test_fraction: 0.2,
            source_ratio: 10.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierKind {
    Trainable,
    Etf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SourceSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub label_smoothing: f64,
    pub balanced_sampling: bool,
    pub bottleneck_dim: usize,
    /// `(gamma, power)` of an inverse-decay schedule; constant when absent.
    pub inverse_decay: Option<(f64, f64)>,
}

impl Default for SourceSection {
    fn default() -> Self {
        let d = SourceConfig::default();
        Self {
            epochs: d.epochs,
            batch_size: d.batch_size,
            learning_rate: d.learning_rate,
            momentum: d.momentum,
            weight_decay: d.weight_decay,
            label_smoothing: d.label_smoothing,
            balanced_sampling: d.balanced_sampling,
            bottleneck_dim: DEFAULT_BOTTLENECK,
            inverse_decay: None,
        }
    }
}

impl SourceSection {
    pub fn to_core(&self, classifier: ClassifierKind, seed: u64) -> SourceConfig {
        SourceConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            label_smoothing: self.label_smoothing,
            balanced_sampling: self.balanced_sampling,
            bottleneck_dim: self.bottleneck_dim,
            classifier_mode: match classifier {
                ClassifierKind::Trainable => ClassifierMode::Trainable,
                ClassifierKind::Etf => ClassifierMode::EtfFixed,
            },
            schedule: match self.inverse_decay {
                Some((gamma, power)) => LrSchedule::InverseDecay { gamma, power },
                None => LrSchedule::Constant,
            },
            seed,
        }
    }
}

/// Aggregation rule as written in configs: `fedavg`, `fedetf`, `fedprox`
/// (with `mu` from the federation section) or `fedprox:<mu>`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct AggregationSpec(pub Aggregation);

impl AggregationSpec {
    pub fn tag(&self) -> String {
        match self.0 {
            Aggregation::FedAvg => "fedavg".into(),
            Aggregation::FedEtf => "fedetf".into(),
            Aggregation::FedProx { mu } => format!("fedprox:{mu}"),
        }
    }

    pub fn classifier(&self) -> ClassifierKind {
        match self.0 {
            Aggregation::FedEtf => ClassifierKind::Etf,
            _ => ClassifierKind::Trainable,
        }
    }
}

impl TryFrom<String> for AggregationSpec {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        let agg = match s.as_str() {
            "fedavg" => Aggregation::FedAvg,
            "fedetf" => Aggregation::FedEtf,
            "fedprox" => Aggregation::FedProx { mu: 0.01 },
            other => match other.strip_prefix("fedprox:") {
                Some(mu) => Aggregation::FedProx {
                    mu: mu
                        .parse()
                        .map_err(|e| format!("bad proximal weight {mu:?}: {e}"))?,
                },
                None => return Err(format!("unknown aggregation {other:?}")),
            },
        };
        Ok(Self(agg))
    }
}

impl From<AggregationSpec> for String {
    fn from(a: AggregationSpec) -> String {
        a.tag()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct MethodSpec(pub SfdaMethod);

impl TryFrom<String> for MethodSpec {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        SfdaMethod::parse(&s).map(Self).map_err(|e| e.to_string())
    }
}

impl From<MethodSpec> for String {
    fn from(m: MethodSpec) -> String {
        m.0.name().into()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationSection {
    pub rounds: usize,
    pub local_epochs: usize,
    pub lambda: f64,
    pub tau: f64,
    pub knn_k: usize,
    pub beta: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub share_bn_stats: bool,
    pub weighted_selection: bool,
}

impl Default for FederationSection {
    fn default() -> Self {
        let d = FedConfig::default();
        Self {
            rounds: d.rounds,
            local_epochs: d.local_epochs,
            lambda: d.lambda,
            tau: d.tau,
            knn_k: d.knn_k,
            beta: d.beta,
            batch_size: d.batch_size,
            learning_rate: d.learning_rate,
            momentum: d.momentum,
            weight_decay: d.weight_decay,
            share_bn_stats: d.share_bn_stats,
            weighted_selection: true,
        }
    }
}

impl FederationSection {
    pub fn to_core(&self, aggregation: Aggregation, method: SfdaMethod, seed: u64) -> FedConfig {
        FedConfig {
            rounds: self.rounds,
            local_epochs: self.local_epochs,
            aggregation,
            method,
            lambda: self.lambda,
            tau: self.tau,
            knn_k: self.knn_k,
            beta: self.beta,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            share_bn_stats: self.share_bn_stats,
            selection: if self.weighted_selection {
                Selection::SizeWeighted
            } else {
                Selection::Unweighted
            },
            seed,
        }
    }
}

/// Axes of the experiment grid. Every combination is one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub scenarios: Vec<Scenario>,
    pub methods: Vec<MethodSpec>,
    pub aggregations: Vec<AggregationSpec>,
    /// Class-mean radii of synthetic domains; ignored for file data.
    pub separabilities: Vec<f64>,
    pub source_seeds: Vec<u64>,
    pub target_seeds: Vec<u64>,
}

impl Default for GridSection {
    fn default() -> Self {
        Self {
            scenarios: vec![Scenario::SITI],
            methods: vec![MethodSpec(SfdaMethod::Shot)],
            aggregations: vec![AggregationSpec(Aggregation::FedAvg)],
            separabilities: vec![1.0],
            source_seeds: vec![0, 1, 2],
            target_seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub setting: Setting,
    pub partition: PartitionSection,
    pub source: SourceSection,
    pub federation: FederationSection,
    pub grid: GridSection,
    pub output_dir: PathBuf,
    /// Grid cells run concurrently; 0 uses every core.
    pub workers: usize,
    /// Keep the selected global head of every cell.
    pub save_heads: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataSource::Synthetic(SyntheticData::default()),
            setting: Setting::Da,
            partition: PartitionSection::default(),
            source: SourceSection::default(),
            federation: FederationSection::default(),
            grid: GridSection::default(),
            output_dir: PathBuf::from("runs"),
            workers: 1,
            save_heads: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> anyhow::Result<Self> {
        serde_json::from_str(text).context("invalid experiment config")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config always serializes")
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let g = &self.grid;
        if g.scenarios.is_empty() || g.methods.is_empty() || g.aggregations.is_empty() {
            bail!("grid needs at least one scenario, method and aggregation");
        }
        if g.source_seeds.is_empty() || g.target_seeds.is_empty() {
            bail!("grid needs at least one source and one target seed");
        }
        if self.partition.clients == 0 {
            bail!("at least one client is required");
        }
        if !(self.partition.source_ratio > 1.0) {
            bail!("source_ratio must exceed 1");
        }
        if !(self.partition.alpha > 0.0) {
            bail!("alpha must be positive");
        }
        match &self.data {
            DataSource::Synthetic(s) => {
                if g.separabilities.is_empty() {
                    bail!("synthetic grids need at least one separability");
                }
                if g.separabilities
                    .iter()
                    .any(|&v| !(v > 0.0 && v.is_finite()))
                {
                    bail!("separabilities must be positive");
                }
                if s.dim == 0 || s.classes < 2 || s.per_class == 0 {
                    bail!("synthetic data needs dim >= 1, classes >= 2 and per_class >= 1");
                }
            }
            DataSource::Files { source, target } => {
                for p in [source, target] {
                    if self.setting == Setting::Tl && p == target {
                        continue;
                    }
                    if !p.exists() {
                        bail!("{} does not exist", p.display());
                    }
                }
            }
        }
        self.source
            .to_core(ClassifierKind::Trainable, 0)
            .validate()?;
        for a in &g.aggregations {
            self.federation
                .to_core(a.0, SfdaMethod::Shot, 0)
                .validate()?;
        }
        Ok(())
    }

    pub fn source_profile(&self, scenario: Scenario, class_order_seed: u64) -> ImbalanceProfile {
        if scenario.source_imbalanced {
            ImbalanceProfile::LongTail {
                ratio: self.partition.source_ratio,
                class_order_seed,
            }
        } else {
            ImbalanceProfile::Balanced
        }
    }

    pub fn target_alpha(&self, scenario: Scenario) -> f64 {
        if scenario.target_imbalanced {
            self.partition.alpha
        } else {
            f64::INFINITY
        }
    }
}
