//! Codec configuration.
//!
//! `CodecConfig::default()` is the full-scale model; `CodecConfig::toy()` is
//! a desk-scale variant small enough for CPU smoke training. Configs
//! round-trip through TOML and are validated before any model is built.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CodecError, Result};
use crate::spectral::SpectrogramConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrontendVariant {
    /// Strided residual convolution blocks with recurrent smoothing.
    Conv,
    /// Per-patch linear projection followed by a small transformer stack.
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontendConfig {
    pub variant: FrontendVariant,
    /// Downsampling factor per conv block; the product must equal `patch_size`.
    pub strides: Vec<usize>,
    /// Output channels per conv block; same length as `strides`.
    pub channels: Vec<usize>,
    /// Recurrent smoothing layers after the conv stack (0 disables).
    pub lstm_layers: usize,
    /// Transformer layers in the linear variant.
    pub linear_layers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionStackConfig {
    pub n_layers: usize,
    pub dim: usize,
    pub n_heads: usize,
    /// Causal attention span in steps: row `t` attends `[t - window + 1, t]`.
    pub window: usize,
    pub ffn_mult: usize,
    pub rope_base: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthArConfig {
    pub n_layers: usize,
    pub dim: usize,
    pub n_heads: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezeMode {
    /// Every quantizer layer stays fixed (the default contract).
    All,
    /// Only the first layer is frozen; later layers receive a dictionary
    /// update term folded into the commitment loss.
    FirstOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizerConfig {
    pub codebook_size: usize,
    pub layers: usize,
    pub dim: usize,
    pub commitment_enabled: bool,
    pub commitment_weight: f64,
    pub freeze: FreezeMode,
    /// Replace semantic-prior codebooks with random ones (ablation).
    pub random_priors: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda_mae: f64,
    pub lambda_ar: f64,
    /// Contiguous frequency bands in the spectral reconstruction term.
    pub subbands: usize,
    /// Masked-row mean squared error when true; mean absolute error over all
    /// frames when false (compatibility mode).
    pub mae_mse_masked: bool,
    pub enable_mae: bool,
    pub enable_ar: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscConfig {
    /// Top channel width per member.
    pub hidden: Vec<usize>,
    /// STFT hop per member; the FFT size is `fft_mult * hop`.
    pub hops: Vec<usize>,
    pub fft_mult: usize,
    pub mel_bins: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub batch: usize,
    pub crop_seconds: f64,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub mask_rate_min: f64,
    pub mask_rate_max: f64,
    pub log_every: usize,
    /// Skip the masked-autoencoding pretraining stage and train everything,
    /// patchify included, in a single adversarial stage (ablation).
    pub single_stage: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub sample_rate: u32,
    pub patch_size: usize,
    /// Legal frames-per-token window sizes; training samples uniformly.
    pub window_sizes: Vec<usize>,
    pub frontend: FrontendConfig,
    pub encoder: AttentionStackConfig,
    pub decoder: AttentionStackConfig,
    /// Stack used by the masked-autoencoding branch (both stages).
    pub mae: AttentionStackConfig,
    pub depth_ar: DepthArConfig,
    pub quantizer: QuantizerConfig,
    pub losses: LossConfig,
    pub spectrogram: SpectrogramConfig,
    pub discriminators: DiscConfig,
    pub training: TrainConfig,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            sample_rate: 24000,
            patch_size: 320,
            window_sizes: (2..=10).collect(),
            frontend: FrontendConfig {
                variant: FrontendVariant::Conv,
                strides: vec![8, 5, 4, 2],
                channels: vec![32, 64, 128, 256],
                lstm_layers: 2,
                linear_layers: 4,
            },
            encoder: AttentionStackConfig {
                n_layers: 24,
                dim: 256,
                n_heads: 4,
                window: 64,
                ffn_mult: 4,
                rope_base: 10000.0,
            },
            decoder: AttentionStackConfig {
                n_layers: 24,
                dim: 512,
                n_heads: 8,
                window: 64,
                ffn_mult: 4,
                rope_base: 10000.0,
            },
            mae: AttentionStackConfig {
                n_layers: 8,
                dim: 256,
                n_heads: 4,
                window: 64,
                ffn_mult: 4,
                rope_base: 10000.0,
            },
            depth_ar: DepthArConfig { n_layers: 4, dim: 256, n_heads: 4 },
            quantizer: QuantizerConfig {
                codebook_size: 2048,
                layers: 3,
                dim: 256,
                commitment_enabled: false,
                commitment_weight: 0.25,
                freeze: FreezeMode::All,
                random_priors: false,
            },
            losses: LossConfig {
                lambda_mae: 0.5,
                lambda_ar: 0.1,
                subbands: 4,
                mae_mse_masked: true,
                enable_mae: true,
                enable_ar: true,
            },
            spectrogram: SpectrogramConfig::default(),
            discriminators: DiscConfig {
                hidden: vec![64, 128, 256, 512, 512, 512],
                hops: vec![32, 64, 128, 256, 512, 1024],
                fft_mult: 4,
                mel_bins: 64,
            },
            training: TrainConfig {
                seed: 42,
                lr: 1e-4,
                weight_decay: 0.01,
                grad_clip: 1.0,
                batch: 4,
                crop_seconds: 1.0,
                stage1_steps: 200_000,
                stage2_steps: 200_000,
                mask_rate_min: 0.2,
                mask_rate_max: 0.3,
                log_every: 100,
                single_stage: false,
            },
        }
    }
}

impl CodecConfig {
    /// Desk-scale configuration: 8 kHz audio, 64-sample patches, narrow
    /// stacks. Used by the fixture corpus and the smoke-training suite.
    pub fn toy() -> Self {
        CodecConfig {
            sample_rate: 8000,
            patch_size: 64,
            window_sizes: (2..=10).collect(),
            frontend: FrontendConfig {
                variant: FrontendVariant::Conv,
                strides: vec![4, 4, 4],
                channels: vec![8, 16, 32],
                lstm_layers: 1,
                linear_layers: 2,
            },
            encoder: AttentionStackConfig {
                n_layers: 4,
                dim: 64,
                n_heads: 4,
                window: 16,
                ffn_mult: 4,
                rope_base: 10000.0,
            },
            decoder: AttentionStackConfig {
                n_layers: 4,
                dim: 128,
                n_heads: 4,
                window: 16,
                ffn_mult: 4,
                rope_base: 10000.0,
            },
            mae: AttentionStackConfig {
                n_layers: 2,
                dim: 64,
                n_heads: 4,
                window: 16,
                ffn_mult: 4,
                rope_base: 10000.0,
            },
            depth_ar: DepthArConfig { n_layers: 2, dim: 64, n_heads: 4 },
            quantizer: QuantizerConfig {
                codebook_size: 64,
                layers: 3,
                dim: 32,
                commitment_enabled: true,
                commitment_weight: 0.25,
                freeze: FreezeMode::All,
                random_priors: false,
            },
            losses: LossConfig {
                lambda_mae: 0.5,
                lambda_ar: 0.1,
                subbands: 4,
                mae_mse_masked: true,
                enable_mae: true,
                enable_ar: true,
            },
            spectrogram: SpectrogramConfig {
                fft_size: 256,
                hop: 64,
                window: crate::spectral::WindowKind::Hann,
                mel_bins: 32,
                fmin: 0.0,
                fmax: None,
            },
            discriminators: DiscConfig {
                hidden: vec![16, 16, 16, 32, 32],
                hops: vec![32, 64, 128, 256, 512],
                fft_mult: 2,
                mel_bins: 16,
            },
            training: TrainConfig {
                seed: 42,
                lr: 3e-4,
                weight_decay: 0.0,
                grad_clip: 1.0,
                batch: 1,
                crop_seconds: 0.2,
                stage1_steps: 2000,
                stage2_steps: 2000,
                mask_rate_min: 0.2,
                mask_rate_max: 0.3,
                log_every: 100,
                single_stage: false,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(CodecError::Config(msg));
        if self.sample_rate == 0 {
            return err("sample_rate must be positive".into());
        }
        if self.patch_size == 0 {
            return err("patch_size must be positive".into());
        }
        if self.window_sizes.is_empty() || self.window_sizes.iter().any(|&w| w == 0) {
            return err(format!("window_sizes must be nonempty and positive: {:?}", self.window_sizes));
        }
        match self.frontend.variant {
            FrontendVariant::Conv => {
                let product: usize = self.frontend.strides.iter().product();
                if product != self.patch_size {
                    return err(format!(
                        "conv strides {:?} multiply to {product}, expected patch_size {}",
                        self.frontend.strides, self.patch_size
                    ));
                }
                if self.frontend.channels.len() != self.frontend.strides.len() {
                    return err(format!(
                        "{} conv channels for {} strides",
                        self.frontend.channels.len(),
                        self.frontend.strides.len()
                    ));
                }
                if self.frontend.channels.iter().any(|&c| c == 0) {
                    return err("conv channels must be positive".into());
                }
            }
            FrontendVariant::Linear => {
                if self.frontend.linear_layers == 0 {
                    return err("linear frontend needs at least one transformer layer".into());
                }
            }
        }
        for (name, s) in [
            ("encoder", &self.encoder),
            ("decoder", &self.decoder),
            ("mae", &self.mae),
        ] {
            validate_stack(name, s)?;
        }
        if self.mae.dim != self.encoder.dim {
            return err(format!(
                "mae stack dim {} must match encoder dim {} (shared frame space)",
                self.mae.dim, self.encoder.dim
            ));
        }
        let d = &self.depth_ar;
        if d.n_layers == 0 || d.dim == 0 || d.n_heads == 0 || d.dim % d.n_heads != 0 {
            return err(format!(
                "depth_ar: layers {}, dim {}, heads {} invalid",
                d.n_layers, d.dim, d.n_heads
            ));
        }
        if (d.dim / d.n_heads) % 2 != 0 {
            return err("depth_ar: head dim must be even for rotary pairs".into());
        }
        let q = &self.quantizer;
        if q.layers < 2 {
            return err(format!("quantizer needs >= 2 layers for depth prediction, got {}", q.layers));
        }
        if q.codebook_size < 2 || q.codebook_size > 65536 {
            return err(format!("codebook_size {} outside [2, 65536]", q.codebook_size));
        }
        if q.dim == 0 {
            return err("quantizer dim must be positive".into());
        }
        if q.commitment_weight < 0.0 {
            return err("commitment_weight must be nonnegative".into());
        }
        let l = &self.losses;
        if l.lambda_mae < 0.0 || l.lambda_ar < 0.0 {
            return err("loss weights must be nonnegative".into());
        }
        if l.subbands == 0 {
            return err("subbands must be >= 1".into());
        }
        if l.subbands > self.spectrogram.bins() {
            return err(format!(
                "subbands {} exceeds spectrogram bin count {}",
                l.subbands,
                self.spectrogram.bins()
            ));
        }
        self.spectrogram.validate()?;
        let disc = &self.discriminators;
        if disc.hidden.len() != disc.hops.len() || disc.hidden.is_empty() {
            return err(format!(
                "discriminators: {} hidden widths for {} hops",
                disc.hidden.len(),
                disc.hops.len()
            ));
        }
        if disc.hops.iter().any(|&h| h == 0) || disc.fft_mult == 0 || disc.mel_bins == 0 {
            return err("discriminator hops, fft_mult, and mel_bins must be positive".into());
        }
        let t = &self.training;
        if !(0.0..1.0).contains(&t.mask_rate_min)
            || !(0.0..1.0).contains(&t.mask_rate_max)
            || t.mask_rate_min > t.mask_rate_max
        {
            return err(format!(
                "mask rate range [{}, {}] must satisfy 0 <= min <= max < 1",
                t.mask_rate_min, t.mask_rate_max
            ));
        }
        if t.batch == 0 {
            return err("batch must be positive".into());
        }
        if t.crop_seconds <= 0.0 {
            return err("crop_seconds must be positive".into());
        }
        if t.lr <= 0.0 {
            return err("lr must be positive".into());
        }
        let crop = (t.crop_seconds * self.sample_rate as f64) as usize;
        let max_disc_fft = disc.hops.iter().map(|h| h * disc.fft_mult).max().unwrap();
        if crop < self.spectrogram.fft_size || crop < max_disc_fft {
            return err(format!(
                "crop of {crop} samples is shorter than an analysis window \
                 (spectrogram fft {}, largest discriminator fft {max_disc_fft})",
                self.spectrogram.fft_size
            ));
        }
        Ok(())
    }

    pub fn crop_samples(&self) -> usize {
        (self.training.crop_seconds * self.sample_rate as f64) as usize
    }
}

fn validate_stack(name: &str, s: &AttentionStackConfig) -> Result<()> {
    if s.n_layers == 0 || s.dim == 0 || s.n_heads == 0 {
        return Err(CodecError::Config(format!(
            "{name}: layers {}, dim {}, heads {} must be positive",
            s.n_layers, s.dim, s.n_heads
        )));
    }
    if s.dim % s.n_heads != 0 {
        return Err(CodecError::Config(format!(
            "{name}: dim {} not divisible by {} heads",
            s.dim, s.n_heads
        )));
    }
    if (s.dim / s.n_heads) % 2 != 0 {
        return Err(CodecError::Config(format!(
            "{name}: head dim {} must be even for rotary pairs",
            s.dim / s.n_heads
        )));
    }
    if s.window == 0 || s.ffn_mult == 0 {
        return Err(CodecError::Config(format!(
            "{name}: window and ffn_mult must be positive"
        )));
    }
    if s.rope_base <= 1.0 {
        return Err(CodecError::Config(format!("{name}: rope_base must exceed 1")));
    }
    Ok(())
}

pub fn load_config(path: impl AsRef<Path>) -> Result<CodecConfig> {
    let text = fs::read_to_string(path.as_ref())?;
    let cfg: CodecConfig =
        toml::from_str(&text).map_err(|e| CodecError::Config(format!("parse: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn save_config(path: impl AsRef<Path>, cfg: &CodecConfig) -> Result<()> {
    cfg.validate()?;
    let text =
        toml::to_string_pretty(cfg).map_err(|e| CodecError::Config(format!("serialize: {e}")))?;
    fs::write(path.as_ref(), text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        CodecConfig::default().validate().unwrap();
        CodecConfig::toy().validate().unwrap();
    }

    #[test]
    fn toml_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("codec.toml");
        let cfg = CodecConfig::toy();
        save_config(&path, &cfg).unwrap();
        let back = load_config(&path).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn rejects_bad_strides() {
        let mut cfg = CodecConfig::toy();
        cfg.frontend.strides = vec![4, 4];
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("patch_size"), "{err}");
    }

    #[test]
    fn rejects_bad_mask_range() {
        let mut cfg = CodecConfig::toy();
        cfg.training.mask_rate_min = 0.5;
        cfg.training.mask_rate_max = 0.4;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn rejects_head_mismatch() {
        let mut cfg = CodecConfig::toy();
        cfg.encoder.n_heads = 5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn rejects_short_crop() {
        let mut cfg = CodecConfig::toy();
        cfg.training.crop_seconds = 0.01;
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("analysis window"), "{err}");
    }
}
