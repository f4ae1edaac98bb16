//! Run configuration: one TOML file covering dataset, experts, distillation,
//! federation, and evaluation. Unknown keys are rejected; after parsing every
//! field holds an explicit value, and the resolved structure is echoed into
//! output manifests.

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::data::{PartitionStrategy, PreprocConfig};
use crate::decoder::{DecoderSpec, SizeClass};
use crate::distiller::DistillConfig;
use crate::error::{Error, Result};
use crate::eval::DownstreamConfig;
use crate::experts::TrainExpertsConfig;
use crate::federated::FederatedPlan;
use crate::nn::{NormKind, StudentArch};

/// Environment variable overriding `dataset.root`.
pub const DATA_ROOT_ENV: &str = "DISTILLKIT_DATA_ROOT";

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSection,
    pub experts: ExpertsSection,
    pub distill: DistillSection,
    pub federated: FederatedSection,
    pub eval: DownstreamConfig,
    pub output: OutputSection,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub name: String,
    pub root: PathBuf,
    pub standardize: bool,
    pub zca: bool,
    pub zca_epsilon: f64,
    pub desk: crate::data::DeskOptions,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            name: "desk10".into(),
            root: PathBuf::from("."),
            standardize: true,
            zca: false,
            zca_epsilon: 0.1,
            desk: crate::data::DeskOptions::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpertsSection {
    pub n_experts: usize,
    pub epochs: usize,
    pub save_interval: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub augment: crate::experts::AugConfig,
    pub width: usize,
    pub blocks: usize,
    pub norm: NormKind,
    pub seed: u64,
}

impl Default for ExpertsSection {
    fn default() -> Self {
        let t = TrainExpertsConfig::default();
        ExpertsSection {
            n_experts: t.n_experts,
            epochs: t.epochs,
            save_interval: t.save_interval,
            lr: t.lr,
            batch_size: t.batch_size,
            augment: t.augment,
            width: 16,
            blocks: 2,
            norm: NormKind::Instance,
            seed: 17,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillSection {
    pub steps: usize,
    pub lr_priors: f64,
    pub lr_decoder: f64,
    pub lr_alpha: f64,
    pub mtt: crate::objectives::MttConfig,
    pub kernels: crate::objectives::KernelMixture,
    pub weights: crate::objectives::LossWeights,
    pub batch_per_class: usize,
    pub mode: crate::bundle::RepresentationMode,
    pub priors_per_class: usize,
    pub latent_dim: usize,
    pub init: crate::latent::InitConfig,
    pub decoder: DecoderSection,
    pub tap_block: usize,
    pub seed: u64,
}

impl Default for DistillSection {
    fn default() -> Self {
        let d = DistillConfig::default();
        DistillSection {
            steps: d.steps,
            lr_priors: d.lr_priors,
            lr_decoder: d.lr_decoder,
            lr_alpha: d.lr_alpha,
            mtt: d.mtt,
            kernels: d.kernels,
            weights: d.weights,
            batch_per_class: d.batch_per_class,
            mode: d.mode,
            priors_per_class: d.priors_per_class,
            latent_dim: d.latent_dim,
            init: d.init,
            decoder: DecoderSection::default(),
            tap_block: d.tap_block,
            seed: d.seed,
        }
    }
}

/// Decoder selection: a Table-style preset or a custom halving schedule.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderSection {
    /// "s" | "m" | "l" | "custom"
    pub preset: String,
    /// Custom only: number of doubling blocks.
    pub blocks: usize,
    /// Custom only: projection channel width.
    pub base_channels: usize,
}

impl Default for DecoderSection {
    fn default() -> Self {
        DecoderSection { preset: "custom".into(), blocks: 3, base_channels: 48 }
    }
}

impl DecoderSection {
    pub fn resolve(
        &self,
        latent_dim: usize,
        output_shape: (usize, usize, usize),
    ) -> Result<DecoderSpec> {
        match self.preset.as_str() {
            "s" | "S" => DecoderSpec::preset(SizeClass::S, output_shape),
            "m" | "M" => DecoderSpec::preset(SizeClass::M, output_shape),
            "l" | "L" => DecoderSpec::preset(SizeClass::L, output_shape),
            "custom" => DecoderSpec::custom(latent_dim, self.blocks, self.base_channels, output_shape),
            other => Err(Error::Config(format!(
                "unknown decoder preset '{other}' (expected s, m, l, or custom)"
            ))),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederatedSection {
    pub subtasks: usize,
    /// "contiguous" | "seeded-random"
    pub strategy: String,
    pub partition_seed: u64,
    pub parallel: usize,
}

impl Default for FederatedSection {
    fn default() -> Self {
        FederatedSection {
            subtasks: 1,
            strategy: "contiguous".into(),
            partition_seed: 0,
            parallel: 1,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { dir: PathBuf::from("runs/default") }
    }
}

// ---------------------------------------------------------------------------
// Loading and resolution
// ---------------------------------------------------------------------------

/// Parse a TOML run configuration; unknown keys fail with their path.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

pub fn parse_config(text: &str) -> Result<RunConfig> {
    toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))
}

impl RunConfig {
    /// Dataset root after applying the environment override.
    pub fn dataset_root(&self) -> PathBuf {
        match std::env::var(DATA_ROOT_ENV) {
            Ok(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.dataset.root.clone(),
        }
    }

    pub fn preproc_config(&self) -> PreprocConfig {
        PreprocConfig {
            standardize: self.dataset.standardize,
            zca: self.dataset.zca,
            zca_epsilon: self.dataset.zca_epsilon,
            desk: self.dataset.desk.clone(),
        }
    }

    pub fn experts_config(&self) -> TrainExpertsConfig {
        TrainExpertsConfig {
            n_experts: self.experts.n_experts,
            epochs: self.experts.epochs,
            save_interval: self.experts.save_interval,
            lr: self.experts.lr,
            batch_size: self.experts.batch_size,
            augment: self.experts.augment.clone(),
        }
    }

    pub fn student_arch(
        &self,
        input: (usize, usize, usize),
        class_count: usize,
    ) -> Result<StudentArch> {
        let arch = StudentArch {
            input,
            block_count: self.experts.blocks,
            width: self.experts.width,
            norm: self.experts.norm,
            class_count,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn distill_config(&self, image_shape: (usize, usize, usize)) -> Result<DistillConfig> {
        let d = &self.distill;
        let cfg = DistillConfig {
            steps: d.steps,
            lr_priors: d.lr_priors,
            lr_decoder: d.lr_decoder,
            lr_alpha: d.lr_alpha,
            mtt: d.mtt.clone(),
            kernels: d.kernels.clone(),
            weights: d.weights,
            batch_per_class: d.batch_per_class,
            mode: d.mode,
            priors_per_class: d.priors_per_class,
            latent_dim: d.latent_dim,
            init: d.init,
            decoder: d.decoder.resolve(d.latent_dim, image_shape)?,
            tap_block: d.tap_block,
            seed: d.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn partition_strategy(&self) -> Result<PartitionStrategy> {
        match self.federated.strategy.as_str() {
            "contiguous" => Ok(PartitionStrategy::Contiguous),
            "seeded-random" => Ok(PartitionStrategy::SeededRandom {
                seed: self.federated.partition_seed,
            }),
            other => Err(Error::Config(format!(
                "unknown partition strategy '{other}'"
            ))),
        }
    }

    pub fn federated_plan(
        &self,
        class_count: usize,
        image_shape: (usize, usize, usize),
    ) -> Result<FederatedPlan> {
        let partition = crate::data::partition_classes(
            class_count,
            self.federated.subtasks,
            self.partition_strategy()?,
        )?;
        let decoder = self
            .distill
            .decoder
            .resolve(self.distill.latent_dim, image_shape)?;
        let plan = FederatedPlan {
            decoder_specs: vec![decoder; partition.k],
            partition,
            distill: self.distill_config(image_shape)?,
            experts: self.experts_config(),
            student_width: self.experts.width,
            student_blocks: self.experts.blocks,
            student_norm: self.experts.norm,
        };
        plan.validate(class_count)?;
        Ok(plan)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_and_round_trip() {
        let cfg = parse_config("").unwrap();
        assert_eq!(cfg.dataset.name, "desk10");
        assert_eq!(cfg.federated.subtasks, 1);
        // serialization echoes every resolved field
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = parse_config(&text).unwrap();
        assert_eq!(back.distill.steps, cfg.distill.steps);
        assert_eq!(back.eval.n_seeds, cfg.eval.n_seeds);
    }

    #[test]
    fn unknown_keys_rejected_with_path() {
        let err = parse_config("[distill]\nstepz = 5\n").unwrap_err();
        match err {
            Error::Config(msg) => assert!(msg.contains("stepz"), "message: {msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
        assert!(parse_config("[nosuchsection]\nx = 1\n").is_err());
    }

    #[test]
    fn partial_files_take_defaults() {
        let cfg = parse_config(
            "[dataset]\nname = \"desk4\"\n\n[distill]\nsteps = 7\npriors_per_class = 3\n",
        )
        .unwrap();
        assert_eq!(cfg.dataset.name, "desk4");
        assert_eq!(cfg.distill.steps, 7);
        assert_eq!(cfg.distill.priors_per_class, 3);
        assert_eq!(cfg.distill.lr_priors, DistillConfig::default().lr_priors);
    }

    #[test]
    fn decoder_section_resolves_presets() {
        let s = DecoderSection { preset: "s".into(), ..DecoderSection::default() };
        let spec = s.resolve(64, (32, 32, 3)).unwrap();
        assert_eq!(spec.size_class, SizeClass::S);
        assert_eq!(spec.latent_dim, 64);
        let c = DecoderSection { preset: "custom".into(), blocks: 2, base_channels: 8 };
        let spec = c.resolve(16, (8, 8, 1)).unwrap();
        assert_eq!(spec.latent_dim, 16);
        assert!(DecoderSection { preset: "xl".into(), ..DecoderSection::default() }
            .resolve(8, (8, 8, 1))
            .is_err());
    }

    #[test]
    fn env_var_overrides_root() {
        let cfg = parse_config("[dataset]\nroot = \"/from/file\"\n").unwrap();
        std::env::remove_var(DATA_ROOT_ENV);
        assert_eq!(cfg.dataset_root(), PathBuf::from("/from/file"));
        std::env::set_var(DATA_ROOT_ENV, "/from/env");
        assert_eq!(cfg.dataset_root(), PathBuf::from("/from/env"));
        std::env::remove_var(DATA_ROOT_ENV);
    }

    #[test]
    fn federated_plan_resolution() {
        let cfg = parse_config(
            "[federated]\nsubtasks = 2\n\n[distill]\nlatent_dim = 8\n[distill.decoder]\npreset = \"custom\"\nblocks = 2\nbase_channels = 8\n",
        )
        .unwrap();
        let plan = cfg.federated_plan(4, (8, 8, 3)).unwrap();
        assert_eq!(plan.partition.k, 2);
        assert_eq!(plan.decoder_specs.len(), 2);
        assert_eq!(plan.partition.subsets[0], vec![0, 1]);
    }
}
