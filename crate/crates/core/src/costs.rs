//! Per-image training FLOPs and communication volume.
//!
//! Backbone and head forward costs of the reference extractors are measured
//! constants; a backward pass is charged at twice its forward pass.

use alloc::string::String;

use crate::error::{invalid, Error, Result};
use crate::head::DEFAULT_BOTTLENECK;

pub const GIGA: f64 = 1e9;
pub const MEGA: f64 = 1e6;

/// Forward FLOPs per image of each backbone.
pub const RESNET50_FLOPS: f64 = 24.6 * GIGA;
pub const RESNET101_FLOPS: f64 = 46.9 * GIGA;
pub const VIT_S_FLOPS: f64 = 11.0 * GIGA;
pub const VIT_B_FLOPS: f64 = 43.9 * GIGA;
/// Forward FLOPs per image of the bottleneck + classifier head.
pub const HEAD_VIT_S_FLOPS: f64 = 0.61 * MEGA;
pub const HEAD_VIT_B_FLOPS: f64 = 1.20 * MEGA;

/// Saved sizes of fully fine-tuned models, in bytes.
pub const RESNET50_MODEL_BYTES: u64 = 94_000_000;
pub const RESNET101_MODEL_BYTES: u64 = 169_000_000;

/// Class count the reference head sizes are quoted for.
pub const REFERENCE_CLASSES: usize = 65;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    ResNet50,
    ResNet101,
    VitS,
    VitB,
    HeadOnlyVitS,
    HeadOnlyVitB,
    Synthetic { in_dim: usize, num_classes: usize },
}

impl ModelKind {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "resnet50" => Self::ResNet50,
            "resnet101" => Self::ResNet101,
            "vit_s" => Self::VitS,
            "vit_b" => Self::VitB,
            "head_only_vit_s" => Self::HeadOnlyVitS,
            "head_only_vit_b" => Self::HeadOnlyVitB,
            other => return Err(Error::UnknownModelKind(String::from(other))),
        })
    }

    /// Embedding width the head consumes.
    pub fn feature_dim(&self) -> usize {
        match self {
            Self::ResNet50 | Self::ResNet101 => 2048,
            Self::VitS | Self::HeadOnlyVitS => 384,
            Self::VitB | Self::HeadOnlyVitB => 768,
            Self::Synthetic { in_dim, .. } => *in_dim,
        }
    }

    fn classes(&self) -> usize {
        match self {
            Self::Synthetic { num_classes, .. } => *num_classes,
            _ => REFERENCE_CLASSES,
        }
    }

    /// Forward FLOPs of the backbone alone; zero for head-only kinds.
    pub fn backbone_flops(&self) -> f64 {
        match self {
            Self::ResNet50 => RESNET50_FLOPS,
            Self::ResNet101 => RESNET101_FLOPS,
            Self::VitS => VIT_S_FLOPS,
            Self::VitB => VIT_B_FLOPS,
            Self::HeadOnlyVitS | Self::HeadOnlyVitB | Self::Synthetic { .. } => 0.0,
        }
    }

    /// Forward FLOPs of the head. Measured for the ViT heads, analytic
    /// `2 * (in_dim * 256 + 256 * C)` otherwise.
    pub fn head_flops(&self) -> f64 {
        match self {
            Self::VitS | Self::HeadOnlyVitS => HEAD_VIT_S_FLOPS,
            Self::VitB | Self::HeadOnlyVitB => HEAD_VIT_B_FLOPS,
            _ => analytic_head_flops(self.feature_dim(), self.classes()),
        }
    }

    fn is_head_only(&self) -> bool {
        matches!(
            self,
            Self::HeadOnlyVitS | Self::HeadOnlyVitB | Self::Synthetic { .. }
        )
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::ResNet50 => "resnet50",
            Self::ResNet101 => "resnet101",
            Self::VitS => "vit_s",
            Self::VitB => "vit_b",
            Self::HeadOnlyVitS => "head_only_vit_s",
            Self::HeadOnlyVitB => "head_only_vit_b",
            Self::Synthetic { .. } => "synthetic",
        }
    }
}

pub fn analytic_head_flops(in_dim: usize, num_classes: usize) -> f64 {
    2.0 * (in_dim * DEFAULT_BOTTLENECK + DEFAULT_BOTTLENECK * num_classes) as f64
}

/// Wire payload of a default head (see [`crate::head::HeadParams::payload_len`]).
pub fn head_payload_bytes(in_dim: usize, num_classes: usize) -> u64 {
    let d = DEFAULT_BOTTLENECK;
    let state = d * in_dim + 3 * d + num_classes * d + num_classes + 2 * d;
    (crate::head::WIRE_HEADER_LEN + 4 * state) as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// Whole network trained and transmitted.
    FineTune,
    /// Backbone frozen but executed every step.
    Frozen,
    /// Backbone outputs cached in a feature bank; only the head runs.
    Skipped,
}

impl TrainMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "finetune" | "fine-tune" => Ok(Self::FineTune),
            "frozen" => Ok(Self::Frozen),
            "skipped" => Ok(Self::Skipped),
            other => Err(invalid(alloc::format!("unknown training mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostLedger {
    pub model_kind: ModelKind,
    pub mode: TrainMode,
    /// Forward FLOPs per image charged to this configuration.
    pub flops_per_image: f64,
    pub payload_bytes: u64,
    pub rounds: usize,
    pub clients: usize,
}

impl CostLedger {
    pub fn new(
        model_kind: ModelKind,
        mode: TrainMode,
        rounds: usize,
        clients: usize,
    ) -> Result<Self> {
        let mode = if model_kind.is_head_only() {
            TrainMode::Skipped
        } else {
            mode
        };
        let flops_per_image = match mode {
            TrainMode::FineTune => model_kind.backbone_flops() + model_kind.head_flops(),
            TrainMode::Frozen => model_kind.backbone_flops(),
            TrainMode::Skipped => model_kind.head_flops(),
        };
        let payload_bytes = match (mode, model_kind) {
            (TrainMode::FineTune, ModelKind::ResNet50) => RESNET50_MODEL_BYTES,
            (TrainMode::FineTune, ModelKind::ResNet101) => RESNET101_MODEL_BYTES,
            (TrainMode::FineTune, kind) => {
                return Err(invalid(alloc::format!(
                    "no fine-tuned model size recorded for {}",
                    kind.name()
                )))
            }
            (_, kind) => head_payload_bytes(kind.feature_dim(), kind.classes()),
        };
        Ok(Self {
            model_kind,
            mode,
            flops_per_image,
            payload_bytes,
            rounds,
            clients,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostReport {
    pub forward_flops_per_image: f64,
    pub train_flops_per_image: f64,
    pub bytes_per_transfer: u64,
    pub bytes_total: u64,
}

pub fn cost_report(ledger: &CostLedger) -> CostReport {
    let kind = ledger.model_kind;
    let train = match ledger.mode {
        TrainMode::FineTune => 3.0 * ledger.flops_per_image,
        TrainMode::Frozen => kind.backbone_flops() + 3.0 * kind.head_flops(),
        TrainMode::Skipped => 3.0 * kind.head_flops(),
    };
    CostReport {
        forward_flops_per_image: ledger.flops_per_image,
        train_flops_per_image: train,
        bytes_per_transfer: ledger.payload_bytes,
        bytes_total: (ledger.rounds as u64) * 2 * (ledger.clients as u64) * ledger.payload_bytes,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_vit_s_forward_cost() {
        let l = CostLedger::new(ModelKind::VitS, TrainMode::Frozen, 10, 3).unwrap();
        assert_eq!(cost_report(&l).forward_flops_per_image, 11.0e9);
    }

    #[test]
    fn skipped_backbone_training_cost() {
        let l = CostLedger::new(ModelKind::HeadOnlyVitS, TrainMode::Frozen, 10, 3).unwrap();
        let r = cost_report(&l);
        assert_eq!(r.forward_flops_per_image, 0.61e6);
        assert!((r.train_flops_per_image - 1.83e6).abs() < 1e-3);
    }

    #[test]
    fn fine_tuned_resnet_payload_dwarfs_the_head() {
        let ft = CostLedger::new(ModelKind::ResNet50, TrainMode::FineTune, 10, 3).unwrap();
        assert_eq!(ft.payload_bytes, 94_000_000);
        let head = CostLedger::new(ModelKind::VitS, TrainMode::Frozen, 10, 3).unwrap();
        assert!(head.payload_bytes < 1_000_000);
        assert_eq!(
            cost_report(&ft).train_flops_per_image,
            3.0 * (24.6e9 + ft.model_kind.head_flops())
        );
    }

    #[test]
    fn bytes_scale_linearly() {
        let one = cost_report(&CostLedger::new(ModelKind::VitB, TrainMode::Skipped, 1, 1).unwrap());
        let many =
            cost_report(&CostLedger::new(ModelKind::VitB, TrainMode::Skipped, 10, 50).unwrap());
        assert_eq!(many.bytes_total, 500 * one.bytes_total);
        assert_eq!(one.bytes_total, 2 * one.bytes_per_transfer);
    }

    #[test]
    fn unknown_kind_is_rejected() {
        assert_eq!(
            ModelKind::parse("vgg16"),
            Err(Error::UnknownModelKind("vgg16".into()))
        );
        assert!(CostLedger::new(ModelKind::VitS, TrainMode::FineTune, 1, 1).is_err());
    }

    #[test]
    fn payload_helper_matches_head() {
        let h =
            crate::head::HeadParams::init(384, 256, 65, crate::head::ClassifierMode::Trainable, 0)
                .unwrap();
        assert_eq!(head_payload_bytes(384, 65), h.payload_len() as u64);
    }
}
