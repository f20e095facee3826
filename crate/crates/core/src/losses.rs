//! Training objectives.
//!
//! Adversarial losses are least-squares. The default label convention is
//! real = 0 / fake = 1: the discriminator pushes real scores to 0 and fake
//! scores to 1, and the generator pushes its fakes toward 0. Under this
//! convention a low mean patch score means "looks real", which is what the
//! pseudo-label quality ranking relies on. [`LabelConvention::RealOne`] flips
//! both targets.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Smoothing term of both Dice variants.
pub const DICE_EPSILON: f64 = 1e-5;

/// Below this mean pixel weight the noise-weighted Dice is nearly degenerate.
pub const LOW_WEIGHT_WARNING: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_cycle: f64,
    pub lambda_adv: f64,
    pub lambda_vae: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_cycle: 10.0,
            lambda_adv: 1.0,
            lambda_vae: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_cycle", self.lambda_cycle),
            ("lambda_adv", self.lambda_adv),
            ("lambda_vae", self.lambda_vae),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelConvention {
    #[default]
    RealZero,
    RealOne,
}

impl LabelConvention {
    fn real_target(self) -> f64 {
        match self {
            LabelConvention::RealZero => 0.0,
            LabelConvention::RealOne => 1.0,
        }
    }

    fn fake_target(self) -> f64 {
        1.0 - self.real_target()
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// `mean((x - target)²)`.
fn mean_sq_to(x: &Tensor, target: f64) -> Result<Tensor> {
    Ok((x - target)?.sqr()?.mean_all()?)
}

/// Mean absolute difference over all elements.
pub fn cycle_loss(original: &Tensor, reconstructed: &Tensor) -> Result<Tensor> {
    same_shape(original, reconstructed, "cycle loss")?;
    Ok((original - reconstructed)?.abs()?.mean_all()?)
}

/// Discriminator side of the least-squares loss.
pub fn lsgan_d_loss(
    real_scores: &Tensor,
    fake_scores: &Tensor,
    conv: LabelConvention,
) -> Result<Tensor> {
    let fake = mean_sq_to(fake_scores, conv.fake_target())?;
    let real = mean_sq_to(real_scores, conv.real_target())?;
    Ok((fake + real)?)
}

/// Generator side of the least-squares loss.
pub fn lsgan_g_loss(fake_scores: &Tensor, conv: LabelConvention) -> Result<Tensor> {
    mean_sq_to(fake_scores, conv.real_target())
}

/// Latent discriminator side; same structure as [`lsgan_d_loss`] on scalar scores.
pub fn vae_adv_loss_d(
    z_fake_scores: &Tensor,
    z_real_scores: &Tensor,
    conv: LabelConvention,
) -> Result<Tensor> {
    lsgan_d_loss(z_real_scores, z_fake_scores, conv)
}

pub fn vae_adv_loss_g(z_fake_scores: &Tensor, conv: LabelConvention) -> Result<Tensor> {
    lsgan_g_loss(z_fake_scores, conv)
}

/// Closed-form `KL(N(mean, exp(logvar)) || N(0, I))`, summed over the latent
/// dimension and averaged over the batch. Inputs are `(B, L)`.
pub fn kl_divergence(mean: &Tensor, logvar: &Tensor) -> Result<Tensor> {
    same_shape(mean, logvar, "KL divergence")?;
    let (b, _) = mean.dims2()?;
    let per = ((logvar.exp()? + mean.sqr()?)? - 1.0)?.sub(logvar)?;
    Ok((per.sum_all()? * (0.5 / b as f64))?)
}

/// Mean squared reconstruction error plus `kl_weight` times the KL term.
pub fn vae_pretrain_loss(
    mask: &Tensor,
    reconstruction: &Tensor,
    mean: &Tensor,
    logvar: &Tensor,
    kl_weight: f64,
) -> Result<Tensor> {
    same_shape(mask, reconstruction, "VAE reconstruction")?;
    let mse = (mask - reconstruction)?.sqr()?.mean_all()?;
    let kl = kl_divergence(mean, logvar)?;
    Ok((mse + (kl * kl_weight)?)?)
}

/// Views `x` as `(batch, pixels)`: rank-1 inputs are a single sample,
/// otherwise the leading dim is the batch.
fn per_sample(x: &Tensor) -> Result<Tensor> {
    Ok(match x.rank() {
        0 => x.reshape((1, 1))?,
        1 => x.reshape((1, x.elem_count()))?,
        _ => {
            let b = x.dim(0)?;
            x.reshape((b, x.elem_count() / b))?
        }
    })
}

fn dice_from_sums(intersection: &Tensor, denominator: &Tensor) -> Result<Tensor> {
    let ratio = ((intersection * 2.0)? + DICE_EPSILON)?.div(&(denominator + DICE_EPSILON)?)?;
    Ok((1.0 - ratio.mean_all()?)?)
}

/// `1 - (2Σpg + ε) / (Σp + Σg + ε)`, per sample, averaged over the batch.
pub fn dice_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    same_shape(pred, target, "dice loss")?;
    let p = per_sample(pred)?;
    let g = per_sample(&target.to_dtype(pred.dtype())?)?;
    let inter = (&p * &g)?.sum(1)?;
    let denom = (&p + &g)?.sum(1)?;
    dice_from_sums(&inter, &denom)
}

/// Noise-weighted Dice with explicit per-pixel weights `w`.
pub fn noise_weighted_dice_with_weights(
    pred: &Tensor,
    target: &Tensor,
    weights: &Tensor,
) -> Result<Tensor> {
    same_shape(pred, target, "noise-weighted dice")?;
    same_shape(pred, weights, "noise-weighted dice weights")?;
    let p = per_sample(pred)?;
    let g = per_sample(target)?;
    let w = per_sample(weights)?;
    let inter = (&w * (&p * &g)?)?.sum(1)?;
    let denom = (&w * (&p + &g)?)?.sum(1)?;
    dice_from_sums(&inter, &denom)
}

/// Per-pixel weights `1 - |p - g|`, detached from the graph.
pub fn noise_weights(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    same_shape(pred, target, "noise weights")?;
    Ok((1.0 - (pred - target)?.abs()?)?.detach())
}

/// Dice loss that down-weights pixels where prediction and pseudo label
/// disagree. The weights carry no gradient.
pub fn noise_weighted_dice_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    let target = target.to_dtype(pred.dtype())?;
    let w = noise_weights(pred, &target)?;
    let mean_w: f64 = w.mean_all()?.to_dtype(DType::F64)?.to_scalar()?;
    if mean_w < LOW_WEIGHT_WARNING {
        log::warn!("noise-weighted dice: mean pixel weight {mean_w:.4} is nearly degenerate");
    }
    noise_weighted_dice_with_weights(pred, &target, &w)
}

/// Scalar value of a 0-d tensor as f64.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
