//! Configuration tree and fingerprints.
//!
//! Key paths mirror the config file sections (`model.encoders`,
//! `model.diffusion`, `model.attention`, `model.fusion`, `train`,
//! `generator`, `eval`). Defaults are the desk-scale settings; every field
//! can be overridden from the TOML file the CLI reads.

use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::scene::AgentClass;
use crate::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub generator: GeneratorConfig,
    pub eval: EvalConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            generator: GeneratorConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl Config {
    /// Stable hash of the model section; stored in checkpoints and reports.
    pub fn model_fingerprint(&self) -> String {
        let json = serde_json::to_string(&self.model).expect("config serializes");
        crate::util::hex64(crate::util::fnv1a64(json.as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.generator.validate()?;
        self.eval.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoders: EncoderConfig,
    pub diffusion: DiffusionConfig,
    pub attention: AttentionConfig,
    pub fusion: FusionConfig,
    pub decoder: DecoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoders: EncoderConfig::default(),
            diffusion: DiffusionConfig::default(),
            attention: AttentionConfig::default(),
            fusion: FusionConfig::default(),
            decoder: DecoderConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.encoders.token_dim == 0 {
            return Err(CoreError::config("model.encoders.token_dim must be > 0"));
        }
        if self.encoders.agent_state_width < 2 {
            return Err(CoreError::config(
                "model.encoders.agent_state_width must be >= 2",
            ));
        }
        if self.encoders.kernel_sizes.is_empty()
            || self.encoders.kernel_sizes.iter().any(|&k| k % 2 == 0)
        {
            return Err(CoreError::config(
                "model.encoders.kernel_sizes must be odd and non-empty",
            ));
        }
        if self.diffusion.steps == 0 {
            return Err(CoreError::config("model.diffusion.steps must be >= 1"));
        }
        if self.diffusion.set_size == 0 {
            return Err(CoreError::config("model.diffusion.set_size must be >= 1"));
        }
        if self.fusion.refine_iters == 0 {
            // T_rec = 0 is accepted by progressive_fuse itself (returns the
            // query unchanged with a warning), but a configured model should
            // refine at least once.
            return Err(CoreError::config("model.fusion.refine_iters must be >= 1"));
        }
        if self.decoder.modes == 0 {
            return Err(CoreError::config("model.decoder.modes must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    /// Token dimension D.
    pub token_dim: usize,
    /// Convolution kernel sizes of the BEV pyramid.
    pub kernel_sizes: Vec<usize>,
    /// Side of the fixed pooling grid BEV tokens are reduced to.
    pub pyramid_grid: usize,
    /// Side of the pre-pool grid rasters are averaged onto before the
    /// convolutions; keeps cost independent of the input resolution.
    pub bev_pool: usize,
    /// Channels per (layer, kernel) convolution.
    pub bev_channels: usize,
    /// Per-frame agent state attributes the temporal encoder consumes.
    pub agent_state_width: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            token_dim: 32,
            kernel_sizes: alloc::vec![3, 5, 7],
            pyramid_grid: 4,
            bev_pool: 16,
            bev_channels: 4,
            agent_state_width: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Cosine,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiffusionNorm {
    /// Squared Frobenius norm of the residual (default).
    Squared,
    /// Plain Frobenius norm.
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    /// Draw a fresh backdoor set every batch (default).
    FreshPerBatch,
    /// Fix one backdoor set per scene for the whole run.
    FixedPerScene,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionConfig {
    /// Chain length m.
    pub steps: usize,
    /// Backdoor set size n.
    pub set_size: usize,
    pub schedule: ScheduleKind,
    pub norm: DiffusionNorm,
    pub sample_mode: SampleMode,
    /// Attention blocks in the denoiser.
    pub blocks: usize,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            steps: 50,
            set_size: 4,
            schedule: ScheduleKind::Cosine,
            norm: DiffusionNorm::Squared,
            sample_mode: SampleMode::FreshPerBatch,
            blocks: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttentionConfig {
    pub heads: usize,
    pub dropout: f64,
    /// Residual + layer norm around each attention view.
    pub residual_layer_norm: bool,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            heads: 1,
            dropout: 0.0,
            residual_layer_norm: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombineSpace {
    /// Subtract the counterfactual composite token before decoding (default).
    Token,
    /// Decode factual and counterfactual separately and subtract offsets.
    Output,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AverageSpace {
    /// Average composite tokens over the backdoor set (default).
    Token,
    /// Decode per sample and average the decoded trajectories.
    Output,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    /// Progressive refinement iterations T_rec.
    pub refine_iters: usize,
    /// Social grid shape: rows along the travel direction, columns across.
    pub grid_rows: usize,
    pub grid_cols: usize,
    /// Social grid cell side, meters.
    pub cell_size_m: f64,
    pub combine_space: CombineSpace,
    pub average_space: AverageSpace,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            refine_iters: 3,
            grid_rows: 13,
            grid_cols: 3,
            cell_size_m: 4.0,
            combine_space: CombineSpace::Token,
            average_space: AverageSpace::Token,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    /// Maneuver mode count K.
    pub modes: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig { modes: 3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainStage {
    Diffusion,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Synthetic,
    NuscenesLike,
    ApolloscapeLike,
    HighwayLike,
}

/// One loss weight: fixed or softplus-parameterized learnable positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeight {
    pub init: f64,
    pub learnable: bool,
}

impl Default for LossWeight {
    fn default() -> Self {
        LossWeight {
            init: 1.0,
            learnable: false,
        }
    }
}

impl LossWeight {
    pub fn fixed(init: f64) -> Self {
        LossWeight {
            init,
            learnable: false,
        }
    }

    pub fn learnable(init: f64) -> Self {
        LossWeight {
            init,
            learnable: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage: TrainStage,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Weight of the displacement term inside the trajectory loss.
    pub lambda_0: LossWeight,
    /// Weight of the negative log-likelihood term.
    pub lambda_1: LossWeight,
    pub lambda_int: LossWeight,
    pub lambda_traj: LossWeight,
    pub dataset_kind: DatasetKind,
    /// Global gradient-norm clip.
    pub grad_clip: f64,
    /// Keep the spatial encoder at its stage-1 weights during stage 2.
    pub freeze_spatial: bool,
    /// Noise magnitudes used as training augmentation (robustness protocol).
    pub train_noise_alphas: Vec<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: TrainStage::Full,
            epochs: 8,
            batch_size: 8,
            learning_rate: 1e-3,
            seed: 0,
            lambda_0: LossWeight::learnable(1.0),
            lambda_1: LossWeight::learnable(1.0),
            lambda_int: LossWeight::fixed(1.0),
            lambda_traj: LossWeight::fixed(1.0),
            dataset_kind: DatasetKind::Synthetic,
            grad_clip: 5.0,
            freeze_spatial: false,
            train_noise_alphas: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(CoreError::config("train.epochs must be > 0"));
        }
        if self.batch_size == 0 {
            return Err(CoreError::config("train.batch_size must be > 0"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(CoreError::config("train.learning_rate must be > 0"));
        }
        for (name, w) in [
            ("lambda_0", self.lambda_0),
            ("lambda_1", self.lambda_1),
            ("lambda_int", self.lambda_int),
            ("lambda_traj", self.lambda_traj),
        ] {
            if !w.init.is_finite() {
                return Err(CoreError::config(format!("train.{name}.init must be finite")));
            }
        }
        Ok(())
    }
}

use alloc::format;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub t_h: usize,
    pub t_f: usize,
    pub dt: f64,
    /// Probability that a crosswalk co-occurs with the accelerate maneuver
    /// in the train split; the shifted test split uses 1 - rho.
    pub rho: f64,
    pub speed_min: f64,
    pub speed_max: f64,
    pub max_neighbors: usize,
    /// Observation noise on history points, meters.
    pub history_noise_sd: f64,
    pub map_points: usize,
    pub bev_size: usize,
    pub bev_resolution: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            train_scenes: 200,
            test_scenes: 100,
            t_h: 8,
            t_f: 10,
            dt: 0.5,
            rho: 0.9,
            speed_min: 4.0,
            speed_max: 9.0,
            max_neighbors: 3,
            history_noise_sd: 0.25,
            map_points: 10,
            bev_size: 64,
            bev_resolution: 0.5,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(CoreError::config("generator.rho must be in [0, 1]"));
        }
        if self.t_h < 2 || self.t_f < 1 {
            return Err(CoreError::config("generator horizon too short"));
        }
        if self.dt <= 0.0 {
            return Err(CoreError::config("generator.dt must be > 0"));
        }
        if self.speed_min <= 0.0 || self.speed_max <= self.speed_min {
            return Err(CoreError::config("generator speed range invalid"));
        }
        if self.map_points < 2 {
            return Err(CoreError::config("generator.map_points must be >= 2"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// k values evaluated for min-of-k ADE.
    pub min_ade_k: Vec<usize>,
    /// Class weights for WSADE/WSFDE; must cover the three classes and sum
    /// to 1. Defaults follow the ApolloScape challenge convention.
    pub class_weights: Vec<(AgentClass, f64)>,
    /// RMSE horizons, seconds.
    pub horizons_s: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            min_ade_k: alloc::vec![1, 3],
            class_weights: alloc::vec![
                (AgentClass::Vehicle, 0.20),
                (AgentClass::Pedestrian, 0.58),
                (AgentClass::Bicycle, 0.22),
            ],
            horizons_s: alloc::vec![1.0, 2.0, 3.0, 4.0, 5.0],
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_ade_k.iter().any(|&k| k == 0) {
            return Err(CoreError::config("eval.min_ade_k entries must be >= 1"));
        }
        let sum: f64 = self.class_weights.iter().map(|(_, w)| w).sum();
        if self.class_weights.iter().any(|(_, w)| *w < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(CoreError::config(
                "eval.class_weights must be nonnegative and sum to 1",
            ));
        }
        Ok(())
    }
}
