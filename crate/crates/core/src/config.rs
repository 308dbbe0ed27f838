//! Declarative experiment configuration.
//!
//! One TOML file drives the whole lifecycle: dataset generation, per-fold
//! training of the three variants, evaluation, and reporting. The file is
//! copied verbatim into the experiment directory before any computation, so
//! every artifact is reproducible from (config file, seed) alone.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datapipe::CaseMode;
use crate::error::{Error, Result};
use crate::evaluation::ModelVariant;
use crate::model::NetworkConfig;
use crate::rng::{derive_seed, tag};
use crate::synthgrowth::GrowthParams;
use crate::training::TrainConfig;
use crate::volume::N_CLASSES;

/// Environment variable that overrides the output root (default: current
/// directory). `output_dir` and `dataset_dir` resolve relative to it.
pub const OUTPUT_ROOT_ENV: &str = "FUTSEG_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSettings {
    pub base_channels: usize,
    pub depth: usize,
    pub latent_dim: usize,
}

impl Default for NetworkSettings {
    fn default() -> Self {
        NetworkSettings { base_channels: 8, depth: 3, latent_dim: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub beta: f64,
    pub learning_rate: f64,
    pub steps: u64,
    pub batch_size: usize,
    pub patch_size: usize,
    pub checkpoint_interval: u64,
    #[serde(default)]
    pub kl_warmup: bool,
    #[serde(default = "default_true")]
    pub augment: bool,
}

fn default_true() -> bool {
    true
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            beta: 1e-3,
            learning_rate: 1e-3,
            steps: 700,
            batch_size: 4,
            patch_size: 48,
            checkpoint_interval: 350,
            kl_warmup: false,
            augment: true,
        }
    }
}

/// Optional per-variant deviations from the base training settings.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainOverride {
    pub beta: Option<f64>,
    pub learning_rate: Option<f64>,
    pub steps: Option<u64>,
    pub batch_size: Option<usize>,
    pub patch_size: Option<usize>,
    pub kl_warmup: Option<bool>,
    pub augment: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VariantOverrides {
    #[serde(default)]
    pub ours: Option<TrainOverride>,
    #[serde(default)]
    pub upper: Option<TrainOverride>,
    #[serde(default)]
    pub lower: Option<TrainOverride>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub n_folds: usize,
    /// How many large-change cases get qualitative figures.
    #[serde(default = "default_qualitative")]
    pub n_qualitative: usize,
}

fn default_qualitative() -> usize {
    3
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings { n_folds: 5, n_qualitative: default_qualitative() }
    }
}

/// The full experiment configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset_dir: PathBuf,
    pub data: GrowthParams,
    #[serde(default)]
    pub network: NetworkSettings,
    #[serde(default)]
    pub training: TrainSettings,
    #[serde(default)]
    pub variants: VariantOverrides,
    #[serde(default)]
    pub evaluation: EvalSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 42,
            output_dir: PathBuf::from("runs/default"),
            dataset_dir: PathBuf::from("datasets/default"),
            data: GrowthParams::default(),
            network: NetworkSettings::default(),
            training: TrainSettings::default(),
            variants: VariantOverrides::default(),
            evaluation: EvalSettings::default(),
        }
    }
}

/// Case mode each variant trains on.
pub fn variant_mode(variant: ModelVariant) -> CaseMode {
    match variant {
        ModelVariant::Ours => CaseMode::AbToC,
        ModelVariant::Upper => CaseMode::CToC,
        ModelVariant::Lower => CaseMode::BToB,
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: ExperimentConfig = toml::from_str(&raw)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok((config, raw))
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        if self.network.depth < 2 {
            return Err(Error::Config("network.depth must be >= 2".into()));
        }
        if self.network.latent_dim < 1 {
            return Err(Error::Config("network.latent_dim must be >= 1".into()));
        }
        let div = 1usize << (self.network.depth - 1);
        if self.data.grid_size % div != 0 {
            return Err(Error::Config(format!(
                "data.grid_size {} must be divisible by 2^(depth-1) = {div}",
                self.data.grid_size
            )));
        }
        if self.training.patch_size % div != 0 || self.training.patch_size > self.data.grid_size {
            return Err(Error::Config(format!(
                "training.patch_size {} must be divisible by {div} and <= grid_size {}",
                self.training.patch_size, self.data.grid_size
            )));
        }
        if self.evaluation.n_folds < 2 {
            return Err(Error::Config("evaluation.n_folds must be >= 2".into()));
        }
        if self.evaluation.n_folds > self.data.n_subjects {
            return Err(Error::Config(format!(
                "evaluation.n_folds {} exceeds n_subjects {}",
                self.evaluation.n_folds, self.data.n_subjects
            )));
        }
        self.base_train_config(ModelVariant::Ours, 0).validate()?;
        Ok(())
    }

    fn override_for(&self, variant: ModelVariant) -> Option<&TrainOverride> {
        match variant {
            ModelVariant::Ours => self.variants.ours.as_ref(),
            ModelVariant::Upper => self.variants.upper.as_ref(),
            ModelVariant::Lower => self.variants.lower.as_ref(),
        }
    }

    fn base_train_config(&self, variant: ModelVariant, fold: usize) -> TrainConfig {
        let t = &self.training;
        let o = self.override_for(variant).cloned().unwrap_or_default();
        TrainConfig {
            mode: variant_mode(variant),
            beta: o.beta.unwrap_or(t.beta),
            learning_rate: o.learning_rate.unwrap_or(t.learning_rate),
            steps: o.steps.unwrap_or(t.steps),
            batch_size: o.batch_size.unwrap_or(t.batch_size),
            patch_size: o.patch_size.unwrap_or(t.patch_size),
            seed: derive_seed(self.seed, &[tag("train"), fold as u64, variant as u64]),
            checkpoint_interval: t.checkpoint_interval,
            kl_warmup: o.kl_warmup.unwrap_or(t.kl_warmup),
            augment: o.augment.unwrap_or(t.augment),
        }
    }

    /// Resolved training configuration for one (variant, fold) job.
    pub fn train_config(&self, variant: ModelVariant, fold: usize) -> TrainConfig {
        self.base_train_config(variant, fold)
    }

    /// Network configuration for one (variant, fold) job.
    pub fn network_config(&self, variant: ModelVariant, fold: usize) -> NetworkConfig {
        NetworkConfig {
            spatial_dims: self.data.spatial_dims,
            n_input_timepoints: variant_mode(variant).n_input_timepoints(),
            n_contrasts: crate::synthgrowth::CONTRAST_NAMES.len(),
            n_classes: N_CLASSES,
            base_channels: self.network.base_channels,
            depth: self.network.depth,
            latent_dim: self.network.latent_dim,
            seed: derive_seed(self.seed, &[tag("net"), fold as u64, variant as u64]),
        }
    }

    /// Seed for fold assignment.
    pub fn fold_seed(&self) -> u64 {
        derive_seed(self.seed, &[tag("folds")])
    }

    /// The root all relative output paths resolve against.
    pub fn output_root() -> PathBuf {
        std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."))
    }

    pub fn experiment_dir(&self) -> PathBuf {
        Self::output_root().join(&self.output_dir)
    }

    pub fn dataset_path(&self) -> PathBuf {
        Self::output_root().join(&self.dataset_dir)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_toml() {
        let config = ExperimentConfig::default();
        let text = config.to_toml_string();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(config, back);
        config.validate().unwrap();
    }

    #[test]
    fn variant_overrides_apply() {
        let mut config = ExperimentConfig::default();
        config.variants.upper = Some(TrainOverride { steps: Some(12), ..Default::default() });
        assert_eq!(config.train_config(ModelVariant::Upper, 0).steps, 12);
        assert_eq!(config.train_config(ModelVariant::Ours, 0).steps, config.training.steps);
        // modes are wired per variant
        assert_eq!(config.train_config(ModelVariant::Ours, 0).mode, CaseMode::AbToC);
        assert_eq!(config.train_config(ModelVariant::Upper, 0).mode, CaseMode::CToC);
        assert_eq!(config.train_config(ModelVariant::Lower, 0).mode, CaseMode::BToB);
    }

    #[test]
    fn seeds_differ_across_folds_and_variants() {
        let config = ExperimentConfig::default();
        let a = config.train_config(ModelVariant::Ours, 0).seed;
        let b = config.train_config(ModelVariant::Ours, 1).seed;
        let c = config.train_config(ModelVariant::Lower, 0).seed;
        assert_ne!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn validation_rejects_bad_combinations() {
        let mut config = ExperimentConfig::default();
        config.training.patch_size = 50; // not divisible by 4
        assert!(config.validate().is_err());

        let mut config = ExperimentConfig::default();
        config.evaluation.n_folds = 1000;
        assert!(config.validate().is_err());
    }

    #[test]
    fn network_inputs_follow_variant_modes() {
        let config = ExperimentConfig::default();
        assert_eq!(config.network_config(ModelVariant::Ours, 0).input_channels(), 8);
        assert_eq!(config.network_config(ModelVariant::Upper, 0).input_channels(), 4);
        assert_eq!(config.network_config(ModelVariant::Lower, 0).input_channels(), 4);
    }
}
