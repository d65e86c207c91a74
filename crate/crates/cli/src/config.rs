//! Run configuration: CLI flags and JSON config files share this struct.

use avatar_core::losses::LossWeights;
use avatar_core::model::ModelConfig;
use avatar_core::optim::LrSchedule;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// "S" | "M" | "L" -> 4 / 6 / 8 fusion layers
    pub model_size: String,
    pub n_points: usize,
    pub image_size: usize,
    pub patch: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub iterations: u64,
    pub warmup: u64,
    pub peak_lr: f64,
    pub checkpoint_every: u64,
    pub sigma_bias: f64,
    pub weights: WeightsConfig,
    /// views written by gen-data
    pub views: usize,
    /// per-joint pose magnitude (radians) for generated views; 0 = rest pose
    pub pose_amplitude: f64,
    /// training view indices; empty = all views in the dataset
    pub train_views: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct WeightsConfig {
    pub rgb: f64,
    pub mask: f64,
    pub perceptual: f64,
    pub dis: f64,
    pub asap: f64,
    pub acap: f64,
}

impl Default for WeightsConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        WeightsConfig {
            rgb: w.rgb,
            mask: w.mask,
            perceptual: w.perceptual,
            dis: w.dis,
            asap: w.asap,
            acap: w.acap,
        }
    }
}

impl WeightsConfig {
    pub fn to_weights(&self) -> LossWeights {
        LossWeights {
            rgb: self.rgb,
            mask: self.mask,
            perceptual: self.perceptual,
            dis: self.dis,
            asap: self.asap,
            acap: self.acap,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model_size: "S".into(),
            n_points: 2048,
            image_size: 64,
            patch: 8,
            min_frames: 1,
            max_frames: 4,
            iterations: 2000,
            warmup: 100,
            peak_lr: 1e-3,
            checkpoint_every: 500,
            sigma_bias: -4.6,
            weights: WeightsConfig::default(),
            views: 16,
            pose_amplitude: 0.0,
            train_views: Vec::new(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |m: &str| Err(CliError::Usage(m.into()));
        if !matches!(self.model_size.as_str(), "S" | "M" | "L") {
            return usage("model_size must be S, M or L");
        }
        if self.min_frames < 1 || self.max_frames > 16 || self.min_frames > self.max_frames {
            return usage("frames-per-batch range must satisfy 1 <= min <= max <= 16");
        }
        if self.n_points == 0 || self.image_size == 0 || self.patch == 0 || self.views == 0 {
            return usage("all counts must be >= 1");
        }
        if self.image_size % self.patch != 0 {
            return usage("image_size must be a multiple of patch");
        }
        if self.iterations == 0 {
            return usage("iterations must be >= 1");
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        let mut cfg = match self.model_size.as_str() {
            "M" => ModelConfig::medium(),
            "L" => ModelConfig::large(),
            _ => ModelConfig::small(),
        };
        cfg.pit.n_points = self.n_points;
        cfg.pit.img_h = self.image_size;
        cfg.pit.img_w = self.image_size;
        cfg.pit.patch = self.patch;
        cfg.sigma_bias = self.sigma_bias;
        cfg
    }

    pub fn lr_schedule(&self) -> LrSchedule {
        LrSchedule {
            peak_lr: self.peak_lr,
            warmup_steps: self.warmup,
            total_steps: self.iterations,
        }
    }

    /// Starts from defaults or a JSON file, then lets callers layer flag
    /// overrides on top.
    pub fn load(path: Option<&std::path::Path>) -> Result<RunConfig, CliError> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Data(format!("config {}: {e}", p.display())))?;
                serde_json::from_str(&text)
                    .map_err(|e| CliError::Usage(format!("config {}: {e}", p.display())))
            }
        }
    }
}
