//! Pipeline configuration: presets, TOML loading and validation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cyclegan::{derive_seed, Stage1Config, VaePretrainConfig};
use crate::data::{PreprocessConfig, RenderConfig};
use crate::maskgen::{Canvas, EllipsePrior};
use crate::nets::{GeneratorSpec, LatentDiscSpec, OutputActivation, PatchDiscSpec, VaeSpec};
use crate::noisy::{IterConfig, LqssConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Seconds-scale settings for tests.
    Micro,
    /// 64x64 CPU benchmark.
    Tiny,
    /// 128x128, a longer CPU run.
    Small,
    /// Full-size settings (256x256, 150 epochs).
    Full,
}

impl Preset {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "micro" => Ok(Self::Micro),
            "tiny" => Ok(Self::Tiny),
            "small" => Ok(Self::Small),
            "full" => Ok(Self::Full),
            other => Err(Error::Config(format!(
                "unknown preset `{other}` (expected micro, tiny, small or full)"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Micro => "micro",
            Self::Tiny => "tiny",
            Self::Small => "small",
            Self::Full => "full",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskgenConfig {
    pub prior: EllipsePrior,
    pub canvas: Canvas,
}

/// Sizes of the generated benchmark data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Rendered images, split into train/val/test.
    pub n_images: usize,
    /// `(train, val, test)` fractions.
    pub split: (f64, f64, f64),
    /// Unpaired shape masks for the mask domain of stage 1.
    pub n_aux_masks: usize,
    /// Masks for VAE pretraining.
    pub n_vae_masks: usize,
    /// Masks held out to score VAE reconstruction.
    pub n_vae_heldout: usize,
    pub preprocess: PreprocessConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct MetricsConfig {
    /// Row/column pixel spacing in mm; defaults to the canvas pixel size.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spacing_mm: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub preset: Preset,
    pub seed: u64,
    pub maskgen: MaskgenConfig,
    pub render: RenderConfig,
    pub data: DataConfig,
    pub vae: VaePretrainConfig,
    pub stage1: Stage1Config,
    pub lqss: LqssConfig,
    pub stage2: IterConfig,
    pub metrics: MetricsConfig,
}

/// Keys that may be absent from a serialized config because they default to
/// nothing.
const OPTIONAL_KEYS: &[&str] = &["stage1.steps_per_epoch", "metrics.spacing_mm"];

impl PipelineConfig {
    pub fn preset(preset: Preset, seed: u64) -> Self {
        let mut cfg = match preset {
            Preset::Full => Self::full(),
            Preset::Small => Self::scaled(128, 32, 4, 6),
            Preset::Tiny => Self::scaled(64, 16, 2, 2),
            Preset::Micro => Self::micro(),
        };
        cfg.preset = preset;
        cfg.seed = seed;
        cfg.assign_seeds();
        cfg
    }

    fn full() -> Self {
        let generator = GeneratorSpec::default();
        Self {
            preset: Preset::Full,
            seed: 0,
            maskgen: MaskgenConfig {
                prior: EllipsePrior::default(),
                canvas: Canvas {
                    size: 256,
                    pixel_mm: 0.8,
                },
            },
            render: RenderConfig::default(),
            data: DataConfig {
                n_images: 1000,
                split: (0.7, 0.1, 0.2),
                n_aux_masks: 1000,
                n_vae_masks: 5000,
                n_vae_heldout: 200,
                preprocess: PreprocessConfig::default(),
            },
            vae: VaePretrainConfig::default(),
            stage1: Stage1Config {
                generator,
                ..Default::default()
            },
            lqss: LqssConfig::default(),
            stage2: IterConfig::default(),
            metrics: MetricsConfig::default(),
        }
    }

    /// Reduced resolution and width; the largest ellipse keeps the same
    /// share of the canvas as at full size.
    fn scaled(size: usize, base: usize, epochs_flat: usize, residual_blocks: usize) -> Self {
        let mut c = Self::full();
        let pixel_mm = 0.8 * 256.0 / size as f64;
        c.maskgen.canvas = Canvas { size, pixel_mm };
        c.render.blur_sigma = 1.0;
        c.data = DataConfig {
            n_images: 429,
            split: (0.7, 0.1, 0.2),
            n_aux_masks: 300,
            n_vae_masks: 2000,
            n_vae_heldout: 100,
            preprocess: PreprocessConfig::for_crop(size),
        };
        c.vae = VaePretrainConfig {
            spec: VaeSpec {
                resolution: size,
                base_channels: 16,
                latent_length: 32,
            },
            epochs: 12,
            decay_epochs: 6,
            batch_size: 8,
            lr: 5e-4,
            kl_weight: 1e-4,
            ..Default::default()
        };
        let generator = GeneratorSpec {
            base_channels: base,
            bottleneck_residual_blocks: residual_blocks,
            ..Default::default()
        };
        c.stage1 = Stage1Config {
            epochs_flat,
            epochs_decay: 2,
            lr: 2e-4,
            generator,
            discriminator: PatchDiscSpec {
                base_channels: base,
                ..Default::default()
            },
            checkpoint_every: 1,
            ..Default::default()
        };
        c.stage2 = IterConfig {
            max_rounds: 3,
            epochs_per_round: 10,
            lr: 1e-3,
            model: GeneratorSpec {
                output_activation: OutputActivation::Sigmoid,
                ..generator
            },
            ..Default::default()
        };
        c
    }

    fn micro() -> Self {
        let mut c = Self::scaled(32, 2, 1, 1);
        c.maskgen.canvas.pixel_mm = 7.0;
        c.data.n_images = 12;
        c.data.n_aux_masks = 6;
        c.data.n_vae_masks = 16;
        c.data.n_vae_heldout = 4;
        c.vae.spec.base_channels = 2;
        c.vae.spec.latent_length = 4;
        c.vae.epochs = 1;
        c.vae.decay_epochs = 0;
        c.vae.batch_size = 8;
        c.stage1.epochs_decay = 1;
        c.stage1.steps_per_epoch = Some(3);
        c.stage1.discriminator.n_layers = 2;
        c.stage1.latent_discriminator = LatentDiscSpec {
            latent_length: 4,
            hidden: 8,
        };
        c.stage1.generator.downsample_levels = 2;
        c.stage2.model.downsample_levels = 2;
        c.stage2.max_rounds = 2;
        c.stage2.epochs_per_round = 1;
        c
    }

    /// Propagates the top-level seed into every sub-config.
    pub fn assign_seeds(&mut self) {
        self.vae.seed = derive_seed(self.seed, "vae");
        self.stage1.seed = derive_seed(self.seed, "stage1");
        self.stage2.seed = derive_seed(self.seed, "stage2");
    }

    /// Pixel spacing used by surface-distance metrics.
    pub fn spacing(&self) -> (f64, f64) {
        self.metrics
            .spacing_mm
            .unwrap_or((self.maskgen.canvas.pixel_mm, self.maskgen.canvas.pixel_mm))
    }

    pub fn validate(&self) -> Result<()> {
        self.maskgen.prior.validate()?;
        self.maskgen.canvas.validate()?;
        self.render.validate()?;
        self.data.preprocess.validate()?;
        self.vae.validate()?;
        self.stage1.validate()?;
        self.lqss.validate()?;
        self.stage2.validate()?;
        let size = self.maskgen.canvas.size;
        if self.vae.spec.resolution != size {
            return Err(Error::Config(format!(
                "vae.spec.resolution {} differs from the canvas size {size}",
                self.vae.spec.resolution
            )));
        }
        if self.data.preprocess.crop != size {
            return Err(Error::Config(format!(
                "data.preprocess.crop {} differs from the canvas size {size}",
                self.data.preprocess.crop
            )));
        }
        for (name, spec) in [
            ("stage1.generator", self.stage1.generator),
            ("stage2.model", self.stage2.model),
        ] {
            if size % spec.size_multiple() != 0 {
                return Err(Error::Config(format!(
                    "{name}: canvas size {size} is not a multiple of {}",
                    spec.size_multiple()
                )));
            }
        }
        if self.stage1.latent_discriminator.latent_length != self.vae.spec.latent_length {
            return Err(Error::Config(
                "stage1.latent_discriminator.latent_length must equal vae.spec.latent_length"
                    .into(),
            ));
        }
        if let Some((a, b)) = self.metrics.spacing_mm {
            if !(a > 0.0 && b > 0.0) {
                return Err(Error::Config("metrics.spacing_mm must be positive".into()));
            }
        }
        Ok(())
    }

    /// Parses TOML text. Keys given in the text override the defaults of the
    /// preset it names (or `preset`, when it names none).
    pub fn from_toml_str(text: &str, preset: Preset) -> Result<Self> {
        let user: toml::Table = text.parse().map_err(|e: toml::de::Error| {
            Error::Config(format!("config is not valid TOML: {}", e.message()))
        })?;
        let preset = match user.get("preset") {
            Some(toml::Value::String(s)) => Preset::parse(s)?,
            Some(_) => return Err(Error::Config("`preset` must be a string".into())),
            None => preset,
        };
        let seed = match user.get("seed") {
            Some(toml::Value::Integer(s)) if *s >= 0 => *s as u64,
            Some(_) => {
                return Err(Error::Config(
                    "`seed` must be a non-negative integer".into(),
                ))
            }
            None => 0,
        };
        let base = Self::preset(preset, seed);
        let mut merged = toml::Table::try_from(&base).expect("config serializes to a table");
        merge(&mut merged, &user, "")?;
        let mut cfg: Self = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.assign_seeds();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, preset: Preset) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        Self::from_toml_str(&std::fs::read_to_string(path)?, preset)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Writes the resolved config next to a run's outputs.
    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_toml())?;
        Ok(())
    }
}

fn merge(base: &mut toml::Table, user: &toml::Table, prefix: &str) -> Result<()> {
    for (key, value) in user {
        let path = if prefix.is_empty() {
            key.clone()
        } else {
            format!("{prefix}.{key}")
        };
        match (base.get_mut(key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) => merge(b, u, &path)?,
            (Some(slot), v) => *slot = v.clone(),
            (None, v) if OPTIONAL_KEYS.contains(&path.as_str()) => {
                base.insert(key.clone(), v.clone());
            }
            (None, _) => return Err(Error::Config(format!("unknown key `{path}`"))),
        }
    }
    Ok(())
}
