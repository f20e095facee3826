//! Shape VAE over masks and the latent-space discriminator.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::layers::{leaky_relu, Conv2d, Linear};
use crate::params::{join, ParamStore};
use crate::{ops, Error, Result};

const SLOPE: f64 = 0.2;
/// Spatial side of the deepest encoder feature map.
const DEEPEST_SIDE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VaeSpec {
    pub resolution: usize,
    pub base_channels: usize,
    pub latent_length: usize,
}

impl Default for VaeSpec {
    fn default() -> Self {
        Self {
            resolution: 256,
            base_channels: 32,
            latent_length: 32,
        }
    }
}

impl VaeSpec {
    fn stages(&self) -> Result<usize> {
        let r = self.resolution;
        if r < 2 * DEEPEST_SIDE || !r.is_power_of_two() {
            return Err(Error::Config(format!(
                "VAE resolution must be a power of two >= {}, got {r}",
                2 * DEEPEST_SIDE
            )));
        }
        Ok((r / DEEPEST_SIDE).trailing_zeros() as usize)
    }

    fn channels_at(&self, stage: usize) -> usize {
        self.base_channels << stage.min(3)
    }
}

/// Mean, log-variance and reparameterized sample, each `(B, latent_length)`.
#[derive(Debug, Clone)]
pub struct LatentCode {
    pub mean: Tensor,
    pub logvar: Tensor,
    pub sample: Tensor,
}

/// `mean + exp(logvar / 2) ⊙ eps`.
pub fn reparameterize(mean: &Tensor, logvar: &Tensor, eps: &Tensor) -> Result<Tensor> {
    Ok((mean + (logvar * 0.5)?.exp()?.mul(eps)?)?)
}

#[derive(Debug, Clone)]
pub struct ShapeVae {
    spec: VaeSpec,
    enc: Vec<Conv2d>,
    to_stats: Linear,
    from_latent: Linear,
    dec: Vec<Conv2d>,
    head: Conv2d,
}

impl ShapeVae {
    pub fn new(store: &mut ParamStore, prefix: &str, spec: VaeSpec) -> Result<Self> {
        let stages = spec.stages()?;
        if spec.latent_length == 0 || spec.base_channels == 0 {
            return Err(Error::Config(
                "VAE latent_length and base_channels must be positive".into(),
            ));
        }
        let mut enc = Vec::with_capacity(stages);
        let mut ch = 1;
        for s in 0..stages {
            let next = spec.channels_at(s);
            enc.push(Conv2d::new_he(
                store,
                &join(prefix, &format!("enc{s}")),
                ch,
                next,
                4,
                2,
                1,
                true,
            )?);
            ch = next;
        }
        let flat = ch * DEEPEST_SIDE * DEEPEST_SIDE;
        let to_stats = Linear::new(
            store,
            &join(prefix, "to_stats"),
            flat,
            2 * spec.latent_length,
        )?;
        let from_latent = Linear::new(
            store,
            &join(prefix, "from_latent"),
            spec.latent_length,
            flat,
        )?;
        let mut dec = Vec::with_capacity(stages);
        for s in (0..stages).rev() {
            let next = spec.channels_at(s.saturating_sub(1));
            dec.push(Conv2d::new_he(
                store,
                &join(prefix, &format!("dec{s}")),
                ch,
                next,
                3,
                1,
                1,
                true,
            )?);
            ch = next;
        }
        let head = Conv2d::new_he(store, &join(prefix, "head"), ch, 1, 3, 1, 1, true)?;
        Ok(Self {
            spec,
            enc,
            to_stats,
            from_latent,
            dec,
            head,
        })
    }

    pub fn spec(&self) -> &VaeSpec {
        &self.spec
    }

    /// Mean and log-variance for masks `(B, 1, R, R)` in `[-1, 1]`.
    pub fn encode_stats(&self, mask: &Tensor) -> Result<(Tensor, Tensor)> {
        let (b, c, h, w) = mask.dims4()?;
        if c != 1 || h != self.spec.resolution || w != self.spec.resolution {
            return Err(Error::Shape(format!(
                "VAE expects (B, 1, {r}, {r}) masks, got {:?}",
                mask.dims(),
                r = self.spec.resolution
            )));
        }
        let mut y = mask.clone();
        for conv in &self.enc {
            y = leaky_relu(&conv.forward(&y)?, SLOPE)?;
        }
        let stats = self.to_stats.forward(&y.reshape((b, ()))?)?;
        let l = self.spec.latent_length;
        Ok((stats.narrow(1, 0, l)?, stats.narrow(1, l, l)?))
    }

    /// Full encoding; `eps` is the standard-normal draw used for the sample.
    pub fn encode(&self, mask: &Tensor, eps: &Tensor) -> Result<LatentCode> {
        let (mean, logvar) = self.encode_stats(mask)?;
        let sample = reparameterize(&mean, &logvar, eps)?;
        Ok(LatentCode {
            mean,
            logvar,
            sample,
        })
    }

    /// Decodes `(B, latent_length)` codes to soft masks in `[-1, 1]`.
    pub fn decode(&self, latent: &Tensor) -> Result<Tensor> {
        Ok(self.decode_linear(latent)?.clamp(-1f32, 1f32)?)
    }

    /// Decoder output before clamping; the reconstruction target during
    /// pretraining. A linear head keeps gradients alive where a squashing
    /// output would saturate on the mostly-background masks.
    pub fn decode_linear(&self, latent: &Tensor) -> Result<Tensor> {
        let (b, l) = latent.dims2()?;
        if l != self.spec.latent_length {
            return Err(Error::Shape(format!(
                "latent length {l}, expected {}",
                self.spec.latent_length
            )));
        }
        let finite = latent
            .flatten_all()?
            .to_dtype(candle_core::DType::F64)?
            .to_vec1::<f64>()?
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Numeric(
                "latent code contains non-finite entries".into(),
            ));
        }
        let ch = self.dec.first().map_or(1, |c| c.weight().dims()[1]);
        let mut y = leaky_relu(&self.from_latent.forward(latent)?, SLOPE)?.reshape((
            b,
            ch,
            DEEPEST_SIDE,
            DEEPEST_SIDE,
        ))?;
        for conv in &self.dec {
            y = leaky_relu(&conv.forward(&ops::upsample_nearest2x(&y)?)?, SLOPE)?;
        }
        self.head.forward(&y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentDiscSpec {
    pub latent_length: usize,
    pub hidden: usize,
}

impl Default for LatentDiscSpec {
    fn default() -> Self {
        Self {
            latent_length: 32,
            hidden: 64,
        }
    }
}

/// Three linear layers with leaky ReLU between them; one scalar per code.
#[derive(Debug, Clone)]
pub struct LatentDiscriminator {
    spec: LatentDiscSpec,
    layers: [Linear; 3],
}

impl LatentDiscriminator {
    pub const LEAKY_SLOPE: f64 = SLOPE;

    pub fn new(store: &mut ParamStore, prefix: &str, spec: LatentDiscSpec) -> Result<Self> {
        let h = spec.hidden;
        Ok(Self {
            spec,
            layers: [
                Linear::new(store, &join(prefix, "fc0"), spec.latent_length, h)?,
                Linear::new(store, &join(prefix, "fc1"), h, h)?,
                Linear::new(store, &join(prefix, "fc2"), h, 1)?,
            ],
        })
    }

    pub fn spec(&self) -> &LatentDiscSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    /// `(B, latent_length) -> (B,)`.
    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        let y = leaky_relu(&self.layers[0].forward(z)?, SLOPE)?;
        let y = leaky_relu(&self.layers[1].forward(&y)?, SLOPE)?;
        Ok(self.layers[2].forward(&y)?.squeeze(1)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn encode_decode_shapes() -> Result<()> {
        let mut store = ParamStore::new(DType::F32, 0);
        let spec = VaeSpec {
            resolution: 32,
            base_channels: 4,
            latent_length: 32,
        };
        let vae = ShapeVae::new(&mut store, "vae", spec)?;
        let x = Tensor::zeros((3, 1, 32, 32), DType::F32, &Device::Cpu)?;
        let eps = Tensor::zeros((3, 32), DType::F32, &Device::Cpu)?;
        let code = vae.encode(&x, &eps)?;
        assert_eq!(code.mean.dims(), &[3, 32]);
        assert_eq!(code.logvar.dims(), &[3, 32]);
        let out = vae.decode(&code.sample)?;
        assert_eq!(out.dims(), &[3, 1, 32, 32]);
        Ok(())
    }

    #[test]
    fn reparameterize_identity() -> Result<()> {
        let z = Tensor::zeros((1, 32), DType::F64, &Device::Cpu)?;
        let s: Vec<f64> = reparameterize(&z, &z, &z)?.flatten_all()?.to_vec1()?;
        assert!(s.iter().all(|&v| v == 0.0));
        Ok(())
    }

    #[test]
    fn non_finite_latent_rejected() -> Result<()> {
        let mut store = ParamStore::new(DType::F32, 0);
        let vae = ShapeVae::new(
            &mut store,
            "vae",
            VaeSpec {
                resolution: 16,
                base_channels: 2,
                latent_length: 4,
            },
        )?;
        let z = Tensor::new(&[[0f32, f32::NAN, 0.0, 0.0]], &Device::Cpu)?;
        assert!(matches!(vae.decode(&z), Err(Error::Numeric(_))));
        Ok(())
    }

    #[test]
    fn latent_disc_is_three_linear_layers() -> Result<()> {
        let mut store = ParamStore::new(DType::F32, 0);
        let d = LatentDiscriminator::new(&mut store, "dz", LatentDiscSpec::default())?;
        assert_eq!(d.layers().len(), 3);
        assert_eq!(d.layers()[0].in_dim(), 32);
        assert_eq!(d.layers()[2].out_dim(), 1);
        let y = d.forward(&Tensor::zeros((5, 32), DType::F32, &Device::Cpu)?)?;
        assert_eq!(y.dims(), &[5]);
        Ok(())
    }
}
