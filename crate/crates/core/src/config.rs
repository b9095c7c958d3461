//! Experiment configuration: a sectioned TOML file mapped onto the runtime
//! structures of every stage. Unknown keys are rejected so typos fail fast.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::TimestepSchedule;
use crate::error::{Error, Result};
use crate::forcing::ForcingConfig;
use crate::inference::StreamConfig;
use crate::model::{LayerKind, ModelConfig};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub model: ModelSection,
    pub diffusion: DiffusionSection,
    pub cache: CacheSection,
    pub train: TrainSection,
    pub data: DataSection,
    pub inference: InferenceSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub n_layers: usize,
    pub model_dim: usize,
    pub n_heads: usize,
    /// Per-layer attention kinds, e.g. "CBCBCB"; C causal, B bidirectional.
    pub layer_pattern: String,
    pub chunk_frames: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub latent_channels: usize,
    pub sink_frames: usize,
    pub cond_dim: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionSection {
    pub steps: Vec<f64>,
    pub snr_split: f64,
    pub tau_grid: Vec<f64>,
    pub alpha: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheSection {
    /// Per-timestep capacity L in frames; must be a multiple of chunk_frames.
    pub capacity: usize,
    /// Sink offset in frame positions; 0 means "use capacity + chunk_frames".
    #[serde(default)]
    pub delta: i64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub teacher: TeacherSection,
    pub accdmd: AccdmdSection,
    pub forcing: ForcingSection,
    pub refiner: RefinerSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherSection {
    pub pretrain_epochs: usize,
    pub sft_epochs: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AccdmdSection {
    pub iterations: usize,
    pub gen_lr: f64,
    pub fake_lr: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForcingSection {
    pub iterations: usize,
    pub l_total: usize,
    pub long_threshold: usize,
    pub gen_lr: f64,
    pub fake_lr: f64,
    #[serde(default = "default_true")]
    pub tail_forcing: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefinerSection {
    pub steps: usize,
    pub pretrain_steps: usize,
    pub l_clip: usize,
    pub dec_lr: f64,
    pub disc_lr: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub adv_weight: f64,
    pub vae_hidden: usize,
    pub disc_width: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub n_identities: usize,
    pub frames_per_video: usize,
    pub pixel_channels: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceSection {
    pub chunks: usize,
    /// "refined" or "base".
    pub decoder: String,
    #[serde(default = "default_true")]
    pub use_sink: bool,
}

fn default_true() -> bool {
    true
}

impl Default for Config {
    fn default() -> Config {
        Config {
            model: ModelSection {
                n_layers: 6,
                model_dim: 64,
                n_heads: 4,
                layer_pattern: "CBCBCB".to_string(),
                chunk_frames: 4,
                grid_h: 8,
                grid_w: 8,
                latent_channels: 4,
                sink_frames: 1,
                cond_dim: 8,
            },
            diffusion: DiffusionSection {
                steps: vec![1.0, 0.75, 0.5, 0.25],
                snr_split: 0.5,
                tau_grid: (1..=9).map(|i| i as f64 / 10.0).collect(),
                alpha: 1.8,
            },
            cache: CacheSection { capacity: 12, delta: 0 },
            train: TrainSection {
                // stage iteration budget ratio 10 : 5 : 2
                teacher: TeacherSection { pretrain_epochs: 30, sft_epochs: 10, lr: 3e-3 },
                accdmd: AccdmdSection { iterations: 100, gen_lr: 1e-3, fake_lr: 2e-3 },
                forcing: ForcingSection {
                    iterations: 50,
                    l_total: 64,
                    long_threshold: 8,
                    gen_lr: 5e-4,
                    fake_lr: 1e-3,
                    tail_forcing: true,
                },
                refiner: RefinerSection {
                    steps: 20,
                    pretrain_steps: 200,
                    l_clip: 8,
                    dec_lr: 3e-3,
                    disc_lr: 1e-3,
                    lambda1: 1.0,
                    lambda2: 1.0,
                    adv_weight: 0.05,
                    vae_hidden: 8,
                    disc_width: 8,
                },
            },
            data: DataSection { n_identities: 8, frames_per_video: 64, pixel_channels: 1 },
            inference: InferenceSection {
                chunks: 8,
                decoder: "refined".to_string(),
                use_sink: true,
            },
        }
    }
}

impl Config {
    /// A heavily shrunk configuration for fast end-to-end runs and tests:
    /// tiny grid, two layers, single-digit iteration counts.
    pub fn tiny() -> Config {
        let mut cfg = Config::default();
        cfg.model = ModelSection {
            n_layers: 2,
            model_dim: 16,
            n_heads: 2,
            layer_pattern: "CB".to_string(),
            chunk_frames: 2,
            grid_h: 2,
            grid_w: 2,
            latent_channels: 2,
            sink_frames: 1,
            cond_dim: 4,
        };
        cfg.cache.capacity = 4;
        cfg.train.teacher = TeacherSection { pretrain_epochs: 4, sft_epochs: 2, lr: 5e-3 };
        cfg.train.accdmd = AccdmdSection { iterations: 6, gen_lr: 1e-3, fake_lr: 2e-3 };
        cfg.train.forcing = ForcingSection {
            iterations: 2,
            l_total: 8,
            long_threshold: 4,
            gen_lr: 5e-4,
            fake_lr: 1e-3,
            tail_forcing: true,
        };
        cfg.train.refiner = RefinerSection {
            steps: 4,
            pretrain_steps: 30,
            l_clip: 4,
            dec_lr: 3e-3,
            disc_lr: 1e-3,
            lambda1: 1.0,
            lambda2: 1.0,
            adv_weight: 0.05,
            vae_hidden: 4,
            disc_width: 4,
        };
        cfg.data = DataSection { n_identities: 2, frames_per_video: 16, pixel_channels: 1 };
        cfg.inference.chunks = 4;
        cfg
    }
}

pub fn parse_layer_pattern(pattern: &str) -> Result<Vec<LayerKind>> {
    pattern
        .chars()
        .map(|c| match c {
            'C' => Ok(LayerKind::Causal),
            'B' => Ok(LayerKind::Bidirectional),
            other => Err(Error::Config(format!(
                "layer pattern may contain only C and B, found {other:?}"
            ))),
        })
        .collect()
}

impl Config {
    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Config =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config()?;
        self.schedule()?;
        if self.cache.capacity % self.model.chunk_frames != 0 {
            return Err(Error::Config(
                "cache.capacity must be a multiple of model.chunk_frames".to_string(),
            ));
        }
        if self.train.forcing.l_total % self.model.chunk_frames != 0 {
            return Err(Error::Config(
                "train.forcing.l_total must be a multiple of model.chunk_frames".to_string(),
            ));
        }
        if self.train.refiner.l_clip % self.model.chunk_frames != 0 {
            return Err(Error::Config(
                "train.refiner.l_clip must be a multiple of model.chunk_frames".to_string(),
            ));
        }
        if self.data.frames_per_video < self.train.forcing.l_total {
            return Err(Error::Config(
                "data.frames_per_video must cover train.forcing.l_total".to_string(),
            ));
        }
        match self.inference.decoder.as_str() {
            "refined" | "base" => {}
            other => {
                return Err(Error::Config(format!(
                    "inference.decoder must be \"refined\" or \"base\", got {other:?}"
                )))
            }
        }
        Ok(())
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let kinds = parse_layer_pattern(&self.model.layer_pattern)?;
        if kinds.len() != self.model.n_layers {
            return Err(Error::Config(format!(
                "layer pattern length {} does not match n_layers {}",
                kinds.len(),
                self.model.n_layers
            )));
        }
        let cfg = ModelConfig {
            n_layers: self.model.n_layers,
            model_dim: self.model.model_dim,
            n_heads: self.model.n_heads,
            layer_kinds: kinds,
            chunk_frames: self.model.chunk_frames,
            grid_h: self.model.grid_h,
            grid_w: self.model.grid_w,
            latent_channels: self.model.latent_channels,
            sink_frames: self.model.sink_frames,
            cond_dim: self.model.cond_dim,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn schedule(&self) -> Result<TimestepSchedule> {
        TimestepSchedule::new(
            self.diffusion.steps.clone(),
            self.diffusion.snr_split,
            self.diffusion.tau_grid.clone(),
        )
    }

    pub fn delta(&self) -> i64 {
        if self.cache.delta != 0 {
            self.cache.delta
        } else {
            (self.cache.capacity + self.model.chunk_frames) as i64
        }
    }

    pub fn stream_config(&self) -> Result<StreamConfig> {
        let mut sc = StreamConfig::new(self.cache.capacity, self.model.chunk_frames)?;
        sc.delta = self.delta();
        sc.use_sink = self.inference.use_sink;
        Ok(sc)
    }

    pub fn forcing_config(&self) -> ForcingConfig {
        ForcingConfig {
            l_total: self.train.forcing.l_total,
            long_threshold: self.train.forcing.long_threshold,
            capacity: self.cache.capacity,
            delta: self.delta(),
            alpha: self.diffusion.alpha,
            iterations: self.train.forcing.iterations,
            gen_lr: self.train.forcing.gen_lr,
            fake_lr: self.train.forcing.fake_lr,
            tail_forcing: self.train.forcing.tail_forcing,
            use_sink: self.inference.use_sink,
        }
    }
}
