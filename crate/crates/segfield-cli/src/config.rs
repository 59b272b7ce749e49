//! Pipeline configuration: one TOML file drives every subcommand.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use segfield_core::field::FieldConfig;
use segfield_core::fusion::FusionConfig;
use segfield_core::pseudo::DistanceMetric;
use segfield_core::synth::ToySceneSpec;
use segfield_core::trainer::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BackendChoice {
    Stub,
    Sam,
}

impl std::fmt::Display for BackendChoice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BackendChoice::Stub => write!(f, "stub"),
            BackendChoice::Sam => write!(f, "sam"),
        }
    }
}

/// Per-stage hyper-parameters as written in the config file. The stage tag
/// and the RNG seed are attached at run time (seeds derive from the
/// top-level `seed`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageConfig {
    pub ray_batch_size: usize,
    pub samples_per_ray: usize,
    pub learning_rate: f64,
    pub lr_final: f64,
    pub iterations: u64,
    pub lambda_train: f64,
    pub lambda_pseudo: f64,
    pub pseudo_mix_fraction: f64,
    pub stratified: bool,
    pub checkpoint_every: u64,
    pub log_every: u64,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            ray_batch_size: 1024,
            samples_per_ray: 64,
            learning_rate: 5e-4,
            lr_final: 5e-5,
            iterations: 20_000,
            lambda_train: 1.0,
            lambda_pseudo: 0.001,
            pseudo_mix_fraction: 0.5,
            stratified: true,
            checkpoint_every: 0,
            log_every: 50,
        }
    }
}

impl StageConfig {
    pub fn to_train_config(&self, stage: u8, rng_seed: u64) -> TrainConfig {
        TrainConfig {
            stage,
            ray_batch_size: self.ray_batch_size,
            samples_per_ray: self.samples_per_ray,
            learning_rate: self.learning_rate,
            lr_final: self.lr_final,
            iterations: self.iterations,
            lambda_train: self.lambda_train,
            lambda_pseudo: self.lambda_pseudo,
            pseudo_mix_fraction: self.pseudo_mix_fraction,
            rng_seed,
            stratified: self.stratified,
            checkpoint_every: self.checkpoint_every,
            log_every: self.log_every,
        }
    }
}

fn default_metric() -> DistanceMetric {
    DistanceMetric::Euclidean
}

fn default_eval_samples() -> usize {
    0 // 0 = reuse stage1.samples_per_ray
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Artifact directory (checkpoints, losses, manifest, evaluation).
    pub output: PathBuf,
    /// Scene directory; generated there when `[toy_scene]` is present.
    pub scene: PathBuf,
    pub backend: BackendChoice,
    #[serde(default = "default_metric")]
    pub metric: DistanceMetric,
    /// Directory of precomputed SAM encoder grids (sam backend only).
    #[serde(default)]
    pub sam_features_dir: Option<PathBuf>,
    /// Rendering sample count for `render`/`evaluate`; 0 = stage-1 value.
    #[serde(default = "default_eval_samples")]
    pub eval_samples_per_ray: usize,
    #[serde(default)]
    pub toy_scene: Option<ToySceneSpec>,
    pub field: FieldConfig,
    pub fusion: FusionConfig,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: PipelineConfig = toml::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.field.validate()?;
        self.fusion.validate()?;
        if let Some(spec) = &self.toy_scene {
            spec.validate()?;
        }
        Ok(())
    }

    pub fn eval_samples(&self) -> usize {
        if self.eval_samples_per_ray == 0 {
            self.stage1.samples_per_ray
        } else {
            self.eval_samples_per_ray
        }
    }
}

/// Resolved invocation context: config file with command-line overrides.
pub struct LoadedConfig {
    pub config: PipelineConfig,
}

pub fn load_config(
    config: Option<&Path>,
    seed: Option<u64>,
    output: Option<&Path>,
) -> Result<LoadedConfig> {
    let Some(path) = config else {
        bail!("this command needs --config <pipeline.toml>");
    };
    let mut cfg = PipelineConfig::load(path)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    if let Some(out) = output {
        cfg.output = out.to_path_buf();
    }
    Ok(LoadedConfig { config: cfg })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_losslessly() {
        let cfg = PipelineConfig {
            seed: 9,
            output: "runs/demo".into(),
            scene: "scenes/demo".into(),
            backend: BackendChoice::Stub,
            metric: DistanceMetric::Cosine,
            sam_features_dir: None,
            eval_samples_per_ray: 24,
            toy_scene: None,
            field: FieldConfig::default(),
            fusion: FusionConfig::default(),
            stage1: StageConfig::default(),
            stage2: StageConfig {
                iterations: 123,
                ..StageConfig::default()
            },
        };
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back: PipelineConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn defaults_fill_missing_stage_fields() {
        let text = r#"
seed = 1
output = "out"
scene = "scene"
backend = "stub"

[field]
position_freqs = 4
direction_freqs = 2
hidden_width = 32
depth = 2
base_feature_dim = 16

[fusion]
model_dim = 16
head_count = 2
encoder_layers = 1
decoder_layers = 1
feedforward_dim = 32
semantic_dim = 2
depth_encoding = true

[stage1]
iterations = 10

[stage2]
iterations = 5
"#;
        let cfg: PipelineConfig = toml::from_str(text).unwrap();
        assert_eq!(cfg.stage1.iterations, 10);
        assert_eq!(cfg.stage1.ray_batch_size, 1024);
        assert_eq!(cfg.stage2.lambda_pseudo, 0.001);
        assert_eq!(cfg.metric, DistanceMetric::Euclidean);
    }
}
