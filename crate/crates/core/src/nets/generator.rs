//! U-Net style translator with a residual bottleneck.
//!
//! Encoder: a stem conv, then `downsample_levels` stages of (stride-2 conv,
//! conv), doubling channels each time. Bottleneck: residual blocks
//! (conv-IN-ReLU-conv-IN plus identity). Decoder: per scale, a 1x1 channel
//! reduction, nearest 2x upsampling and concatenation with the matching
//! encoder skip. The concatenated tensor is the feature map that channel
//! calibration acts on, so scale `s` (1-based, coarsest first) carries
//! `base * 2^(levels - s + 1)` channels.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use super::layers::{instance_norm, sigmoid, Conv2d};
use crate::params::{join, ParamStore};
use crate::{ops, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    Tanh,
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_channels: usize,
    pub downsample_levels: usize,
    pub bottleneck_residual_blocks: usize,
    pub output_activation: OutputActivation,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            in_channels: 1,
            out_channels: 1,
            base_channels: 64,
            downsample_levels: 4,
            bottleneck_residual_blocks: 6,
            output_activation: OutputActivation::Tanh,
        }
    }
}

impl GeneratorSpec {
    /// Channel count of the calibrated decoder feature at each scale, coarsest first.
    pub fn decoder_channels(&self) -> Vec<usize> {
        (1..=self.downsample_levels)
            .map(|s| self.base_channels << (self.downsample_levels - s + 1))
            .collect()
    }

    /// Input side length must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << self.downsample_levels
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.downsample_levels == 0 {
            return Err(Error::Config(
                "generator needs base_channels > 0 and downsample_levels > 0".into(),
            ));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config(
                "generator channel counts must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct ResidualBlock {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl ResidualBlock {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = instance_norm(&self.conv1.forward(x)?)?.relu()?;
        let y = instance_norm(&self.conv2.forward(&y)?)?;
        Ok((x + y)?)
    }
}

#[derive(Debug, Clone)]
struct DecoderStage {
    reduce: Conv2d,
    fuse: Conv2d,
}

#[derive(Debug, Clone)]
pub struct Generator {
    spec: GeneratorSpec,
    stem: Conv2d,
    down: Vec<(Conv2d, Conv2d)>,
    bottleneck: Vec<ResidualBlock>,
    up: Vec<DecoderStage>,
    head: Conv2d,
}

fn conv_in_relu(conv: &Conv2d, x: &Tensor) -> Result<Tensor> {
    Ok(instance_norm(&conv.forward(x)?)?.relu()?)
}

impl Generator {
    pub fn new(store: &mut ParamStore, prefix: &str, spec: GeneratorSpec) -> Result<Self> {
        spec.validate()?;
        let b = spec.base_channels;
        let stem = Conv2d::new(
            store,
            &join(prefix, "stem"),
            spec.in_channels,
            b,
            3,
            1,
            1,
            false,
        )?;
        let mut down = Vec::with_capacity(spec.downsample_levels);
        let mut ch = b;
        for l in 0..spec.downsample_levels {
            let p = join(prefix, &format!("down{l}"));
            let d = Conv2d::new(store, &join(&p, "stride"), ch, 2 * ch, 3, 2, 1, false)?;
            let c = Conv2d::new(store, &join(&p, "conv"), 2 * ch, 2 * ch, 3, 1, 1, false)?;
            down.push((d, c));
            ch *= 2;
        }
        let mut bottleneck = Vec::with_capacity(spec.bottleneck_residual_blocks);
        for r in 0..spec.bottleneck_residual_blocks {
            let p = join(prefix, &format!("res{r}"));
            bottleneck.push(ResidualBlock {
                conv1: Conv2d::new(store, &join(&p, "conv1"), ch, ch, 3, 1, 1, false)?,
                conv2: Conv2d::new(store, &join(&p, "conv2"), ch, ch, 3, 1, 1, false)?,
            });
        }
        let mut up = Vec::with_capacity(spec.downsample_levels);
        for s in 0..spec.downsample_levels {
            let p = join(prefix, &format!("up{s}"));
            up.push(DecoderStage {
                reduce: Conv2d::new(store, &join(&p, "reduce"), ch, ch / 2, 1, 1, 0, false)?,
                fuse: Conv2d::new(store, &join(&p, "fuse"), ch, ch / 2, 3, 1, 1, false)?,
            });
            ch /= 2;
        }
        let head = Conv2d::new(
            store,
            &join(prefix, "head"),
            ch,
            spec.out_channels,
            3,
            1,
            1,
            true,
        )?;
        Ok(Self {
            spec,
            stem,
            down,
            bottleneck,
            up,
            head,
        })
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    pub fn decoder_channels(&self) -> Vec<usize> {
        self.spec.decoder_channels()
    }

    /// `x` is `(batch, in_channels, h, w)` with `h`, `w` divisible by `2^levels`.
    ///
    /// `calibration`, when given, holds one `(batch, C_s)` coefficient tensor
    /// per decoder scale; each calibrated feature becomes `β ⊙ u + u`.
    pub fn forward(&self, x: &Tensor, calibration: Option<&[Tensor]>) -> Result<Tensor> {
        let (batch, in_ch, h, w) = x.dims4()?;
        if in_ch != self.spec.in_channels {
            return Err(Error::Shape(format!(
                "generator expects {} input channels, got {in_ch}",
                self.spec.in_channels
            )));
        }
        let m = self.spec.size_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(Error::Shape(format!(
                "generator input {h}x{w} not divisible by {m}"
            )));
        }
        if let Some(betas) = calibration {
            self.check_calibration(betas, batch)?;
        }

        let mut skips = Vec::with_capacity(self.down.len());
        let mut y = conv_in_relu(&self.stem, x)?;
        for (stride, conv) in &self.down {
            skips.push(y.clone());
            y = conv_in_relu(stride, &y)?;
            y = conv_in_relu(conv, &y)?;
        }
        for block in &self.bottleneck {
            y = block.forward(&y)?;
        }
        for (s, stage) in self.up.iter().enumerate() {
            let reduced = ops::upsample_nearest2x(&stage.reduce.forward(&y)?)?;
            let skip = skips.pop().expect("one skip per level");
            let mut u = Tensor::cat(&[&reduced, &skip], 1)?;
            if let Some(betas) = calibration {
                u = calibrate(&u, &betas[s])?;
            }
            y = conv_in_relu(&stage.fuse, &u)?;
        }
        let out = self.head.forward(&y)?;
        match self.spec.output_activation {
            OutputActivation::Tanh => Ok(out.tanh()?),
            OutputActivation::Sigmoid => sigmoid(&out),
        }
    }

    fn check_calibration(&self, betas: &[Tensor], batch: usize) -> Result<()> {
        let expected = self.decoder_channels();
        if betas.len() != expected.len() {
            return Err(Error::Shape(format!(
                "expected {} calibration vectors, got {}",
                expected.len(),
                betas.len()
            )));
        }
        for (s, (beta, &c)) in betas.iter().zip(&expected).enumerate() {
            if beta.dims() != [batch, c] {
                return Err(Error::Shape(format!(
                    "calibration vector for scale {} has shape {:?}, expected [{batch}, {c}]",
                    s + 1,
                    beta.dims()
                )));
            }
        }
        Ok(())
    }
}

/// Channel-wise residual calibration `û = β ⊙ u + u` with `u: (B, C, H, W)`, `β: (B, C)`.
pub fn calibrate(u: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let (b, c, _, _) = u.dims4()?;
    if beta.dims() != [b, c] {
        return Err(Error::Shape(format!(
            "calibration vector shape {:?} does not match feature map {:?}",
            beta.dims(),
            u.dims()
        )));
    }
    let scaled = u.broadcast_mul(&beta.reshape((b, c, 1, 1))?)?;
    Ok((scaled + u)?)
}

/// Spatial mean per channel: `(B, C, H, W) -> (B, C)`.
pub fn global_average_pool(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h * w))?.mean(D::Minus1)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn tiny_spec() -> GeneratorSpec {
        GeneratorSpec {
            base_channels: 4,
            downsample_levels: 3,
            bottleneck_residual_blocks: 1,
            ..GeneratorSpec::default()
        }
    }

    #[test]
    fn decoder_channels_at_full_width() {
        assert_eq!(
            GeneratorSpec::default().decoder_channels(),
            vec![1024, 512, 256, 128]
        );
    }

    #[test]
    fn output_matches_input_size_and_range() -> Result<()> {
        let mut store = ParamStore::new(DType::F32, 0);
        let g = Generator::new(&mut store, "g", tiny_spec())?;
        let x = Tensor::randn(0f32, 1.0, (2, 1, 16, 16), &Device::Cpu)?;
        let y = g.forward(&x, None)?;
        assert_eq!(y.dims(), &[2, 1, 16, 16]);
        let max: f32 = y.abs()?.max_all()?.to_scalar()?;
        assert!(max <= 1.0);
        Ok(())
    }

    #[test]
    fn rejects_bad_calibration_lengths() -> Result<()> {
        let mut store = ParamStore::new(DType::F32, 0);
        let g = Generator::new(&mut store, "g", tiny_spec())?;
        let x = Tensor::zeros((1, 1, 16, 16), DType::F32, &Device::Cpu)?;
        let betas: Vec<Tensor> = [32usize, 16, 9]
            .iter()
            .map(|&c| Tensor::zeros((1, c), DType::F32, &Device::Cpu))
            .collect::<candle_core::Result<_>>()?;
        assert!(matches!(g.forward(&x, Some(&betas)), Err(Error::Shape(_))));
        assert!(matches!(
            g.forward(&x, Some(&betas[..2])),
            Err(Error::Shape(_))
        ));
        Ok(())
    }

    #[test]
    fn rejects_indivisible_input() -> Result<()> {
        let mut store = ParamStore::new(DType::F32, 0);
        let g = Generator::new(&mut store, "g", tiny_spec())?;
        let x = Tensor::zeros((1, 1, 12, 12), DType::F32, &Device::Cpu)?;
        assert!(g.forward(&x, None).is_err());
        Ok(())
    }

    #[test]
    fn calibrate_identity_and_doubling() -> Result<()> {
        let u = Tensor::randn(0f64, 1.0, (2, 3, 4, 4), &Device::Cpu)?;
        let zero = Tensor::zeros((2, 3), DType::F64, &Device::Cpu)?;
        let same = calibrate(&u, &zero)?;
        let a: Vec<f64> = u.flatten_all()?.to_vec1()?;
        let b: Vec<f64> = same.flatten_all()?.to_vec1()?;
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        let doubled: Vec<f64> = calibrate(&u, &zero.ones_like()?)?
            .flatten_all()?
            .to_vec1()?;
        assert!(a
            .iter()
            .zip(&doubled)
            .all(|(x, y)| (2.0 * x - y).abs() < 1e-15));
        assert!(calibrate(&u, &Tensor::zeros((2, 4), DType::F64, &Device::Cpu)?).is_err());
        Ok(())
    }
}
