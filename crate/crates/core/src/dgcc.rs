//! Discriminator-guided generator channel calibration.
//!
//! The mask discriminator's embedding of the previous turn's output is pooled
//! per channel and mapped, once per decoder scale, to a coefficient vector
//! `β = W2 · relu(W1 · pooled)`. The generator is then rerun with every
//! decoder feature replaced by `β ⊙ u + u`. Turn 1 runs uncalibrated.

use candle_core::Tensor;

use crate::nets::layers::{Linear, INIT_STD};
use crate::nets::{global_average_pool, Generator, PatchDiscriminator};
use crate::params::{join, ParamStore};
use crate::{Error, Result};

/// Squeeze ratio of the hidden layer.
pub const REDUCTION: usize = 4;

/// One squeeze-excitation style head producing the coefficients for one scale.
#[derive(Debug, Clone)]
pub struct ScaleCalibrator {
    w1: Linear,
    w2: Linear,
}

impl ScaleCalibrator {
    fn new(
        store: &mut ParamStore,
        prefix: &str,
        feedback_channels: usize,
        channels: usize,
    ) -> Result<Self> {
        let hidden = (channels / REDUCTION).max(1);
        Ok(Self {
            w1: Linear::new(store, &join(prefix, "w1"), feedback_channels, hidden)?,
            w2: Linear::new_normal(store, &join(prefix, "w2"), hidden, channels, INIT_STD)?,
        })
    }

    /// `(B, C_feedback) -> (B, C_s)`; no output nonlinearity.
    pub fn forward(&self, pooled: &Tensor) -> Result<Tensor> {
        self.w2.forward(&self.w1.forward(pooled)?.relu()?)
    }

    pub fn w1(&self) -> &Linear {
        &self.w1
    }

    pub fn w2(&self) -> &Linear {
        &self.w2
    }

    pub fn out_channels(&self) -> usize {
        self.w2.out_dim()
    }
}

/// The per-scale calibrators attached to one generator.
#[derive(Debug, Clone)]
pub struct Dgcc {
    scales: Vec<ScaleCalibrator>,
    feedback_channels: usize,
}

impl Dgcc {
    /// `decoder_channels` lists the generator's calibrated channel counts, coarsest first.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        feedback_channels: usize,
        decoder_channels: &[usize],
    ) -> Result<Self> {
        let scales = decoder_channels
            .iter()
            .enumerate()
            .map(|(s, &c)| {
                ScaleCalibrator::new(
                    store,
                    &join(prefix, &format!("scale{}", s + 1)),
                    feedback_channels,
                    c,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            scales,
            feedback_channels,
        })
    }

    pub fn num_scales(&self) -> usize {
        self.scales.len()
    }

    pub fn feedback_channels(&self) -> usize {
        self.feedback_channels
    }

    pub fn scale(&self, scale: usize) -> Result<&ScaleCalibrator> {
        if scale == 0 || scale > self.scales.len() {
            return Err(Error::Argument(format!(
                "calibration scale {scale} outside 1..={}",
                self.scales.len()
            )));
        }
        Ok(&self.scales[scale - 1])
    }

    /// Coefficient vector for one scale (1-based).
    pub fn compute_calibration(&self, pooled: &Tensor, scale: usize) -> Result<Tensor> {
        let (_, c) = pooled.dims2()?;
        if c != self.feedback_channels {
            return Err(Error::Shape(format!(
                "pooled feedback has {c} channels, expected {}",
                self.feedback_channels
            )));
        }
        self.scale(scale)?.forward(pooled)
    }

    /// Coefficient vectors for all scales, coarsest first.
    pub fn calibration_vectors(&self, pooled: &Tensor) -> Result<Vec<Tensor>> {
        (1..=self.scales.len())
            .map(|s| self.compute_calibration(pooled, s))
            .collect()
    }
}

/// Per-channel spatial mean of the discriminator embedding.
pub fn extract_feedback(embedding: &Tensor) -> Result<Tensor> {
    global_average_pool(embedding)
}

pub use crate::nets::calibrate as calibrate_features;

/// Output of [`recurrent_generate_traced`].
#[derive(Debug, Clone)]
pub struct Recurrence {
    /// Output of the final turn.
    pub mask: Tensor,
    /// Coefficients used at turns 2..=T (empty when T = 1).
    pub betas: Vec<Vec<Tensor>>,
}

/// Runs `turns` rounds of generate → discriminate → calibrate and returns the
/// last mask.
pub fn recurrent_generate(
    image: &Tensor,
    generator: &Generator,
    discriminator: &PatchDiscriminator,
    dgcc: &Dgcc,
    turns: usize,
) -> Result<Tensor> {
    Ok(recurrent_generate_traced(image, generator, discriminator, dgcc, turns)?.mask)
}

pub fn recurrent_generate_traced(
    image: &Tensor,
    generator: &Generator,
    discriminator: &PatchDiscriminator,
    dgcc: &Dgcc,
    turns: usize,
) -> Result<Recurrence> {
    if turns == 0 {
        return Err(Error::Argument("DGCC needs at least one turn".into()));
    }
    let mut mask = generator.forward(image, None)?;
    let mut betas = Vec::with_capacity(turns - 1);
    for _ in 1..turns {
        let feedback = extract_feedback(&discriminator.embedding(&mask)?)?;
        let beta = dgcc.calibration_vectors(&feedback)?;
        mask = generator.forward(image, Some(&beta))?;
        betas.push(beta);
    }
    Ok(Recurrence { mask, betas })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{GeneratorSpec, PatchDiscSpec};
    use candle_core::{DType, Device};

    fn bits(t: &Tensor) -> Vec<u64> {
        t.flatten_all()
            .unwrap()
            .to_dtype(DType::F64)
            .unwrap()
            .to_vec1::<f64>()
            .unwrap()
            .into_iter()
            .map(f64::to_bits)
            .collect()
    }

    fn setup(store: &mut ParamStore) -> Result<(Generator, PatchDiscriminator, Dgcc)> {
        let gspec = GeneratorSpec {
            base_channels: 4,
            downsample_levels: 4,
            bottleneck_residual_blocks: 1,
            ..Default::default()
        };
        let g = Generator::new(store, "g", gspec)?;
        let mut dstore = ParamStore::new(DType::F64, 9);
        let d = PatchDiscriminator::new(
            &mut dstore,
            "d",
            PatchDiscSpec {
                base_channels: 4,
                ..Default::default()
            },
        )?;
        let dgcc = Dgcc::new(
            store,
            "dgcc",
            d.spec().embedding_channels(),
            &g.decoder_channels(),
        )?;
        Ok((g, d, dgcc))
    }

    #[test]
    fn feedback_is_channel_mean() -> Result<()> {
        let emb = Tensor::new(&[[[[1.0f64, 3.0]], [[5.0, 5.0]]]], &Device::Cpu)?;
        let pooled: Vec<f64> = extract_feedback(&emb)?.flatten_all()?.to_vec1()?;
        assert_eq!(pooled, vec![2.0, 5.0]);
        Ok(())
    }

    #[test]
    fn scale_index_checked() -> Result<()> {
        let mut store = ParamStore::new(DType::F64, 0);
        let (_, _, dgcc) = setup(&mut store)?;
        let pooled = Tensor::zeros((1, dgcc.feedback_channels()), DType::F64, &Device::Cpu)?;
        assert!(matches!(
            dgcc.compute_calibration(&pooled, 0),
            Err(Error::Argument(_))
        ));
        assert!(matches!(
            dgcc.compute_calibration(&pooled, 5),
            Err(Error::Argument(_))
        ));
        assert_eq!(dgcc.compute_calibration(&pooled, 4)?.dims(), &[1, 8]);
        Ok(())
    }

    #[test]
    fn one_turn_is_plain_forward() -> Result<()> {
        let mut store = ParamStore::new(DType::F64, 0);
        let (g, d, dgcc) = setup(&mut store)?;
        let x = Tensor::randn(0f64, 1.0, (1, 1, 32, 32), &Device::Cpu)?;
        let a = recurrent_generate(&x, &g, &d, &dgcc, 1)?;
        let b = g.forward(&x, None)?;
        assert_eq!(bits(&a), bits(&b));
        assert!(recurrent_generate(&x, &g, &d, &dgcc, 0).is_err());
        Ok(())
    }

    #[test]
    fn zeroed_calibrators_make_turns_idempotent() -> Result<()> {
        let mut store = ParamStore::new(DType::F64, 0);
        let (g, d, dgcc) = setup(&mut store)?;
        for (name, var) in store.iter() {
            if name.starts_with("dgcc.") {
                var.set(&var.zeros_like()?)?;
            }
        }
        let x = Tensor::randn(0f64, 1.0, (1, 1, 32, 32), &Device::Cpu)?;
        let t1 = recurrent_generate(&x, &g, &d, &dgcc, 1)?;
        let t2 = recurrent_generate_traced(&x, &g, &d, &dgcc, 2)?;
        assert_eq!(bits(&t1), bits(&t2.mask));
        assert_eq!(t2.betas.len(), 1);
        let t3a = recurrent_generate(&x, &g, &d, &dgcc, 3)?;
        let t3b = recurrent_generate(&x, &g, &d, &dgcc, 3)?;
        assert_eq!(bits(&t3a), bits(&t3b));
        Ok(())
    }
}
