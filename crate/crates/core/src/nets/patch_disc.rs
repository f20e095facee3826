//! Fully convolutional patch discriminator (the 70x70 PatchGAN layout).

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::layers::{instance_norm, leaky_relu, Conv2d};
use crate::params::{join, ParamStore};
use crate::{Error, Result};

const SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchDiscSpec {
    pub in_channels: usize,
    pub base_channels: usize,
    /// Number of stride-2 layers; three gives the 70x70 receptive field.
    pub n_layers: usize,
}

impl Default for PatchDiscSpec {
    fn default() -> Self {
        Self {
            in_channels: 1,
            base_channels: 64,
            n_layers: 3,
        }
    }
}

impl PatchDiscSpec {
    /// Channels of the embedding right before the output layer.
    pub fn embedding_channels(&self) -> usize {
        self.base_channels << self.n_layers.min(3)
    }
}

#[derive(Debug, Clone)]
pub struct PatchDiscriminator {
    spec: PatchDiscSpec,
    // (conv, normalized?)
    body: Vec<(Conv2d, bool)>,
    out: Conv2d,
}

impl PatchDiscriminator {
    pub fn new(store: &mut ParamStore, prefix: &str, spec: PatchDiscSpec) -> Result<Self> {
        if spec.base_channels == 0 || spec.n_layers == 0 {
            return Err(Error::Config(
                "patch discriminator needs base_channels > 0 and n_layers > 0".into(),
            ));
        }
        let b = spec.base_channels;
        let mut body = vec![(
            Conv2d::new(
                store,
                &join(prefix, "conv0"),
                spec.in_channels,
                b,
                4,
                2,
                1,
                true,
            )?,
            false,
        )];
        let mut ch = b;
        for l in 1..spec.n_layers {
            let next = b << l.min(3);
            body.push((
                Conv2d::new(
                    store,
                    &join(prefix, &format!("conv{l}")),
                    ch,
                    next,
                    4,
                    2,
                    1,
                    false,
                )?,
                true,
            ));
            ch = next;
        }
        let next = b << spec.n_layers.min(3);
        body.push((
            Conv2d::new(
                store,
                &join(prefix, &format!("conv{}", spec.n_layers)),
                ch,
                next,
                4,
                1,
                1,
                false,
            )?,
            true,
        ));
        let out = Conv2d::new(store, &join(prefix, "out"), next, 1, 4, 1, 1, true)?;
        Ok(Self { spec, body, out })
    }

    pub fn spec(&self) -> &PatchDiscSpec {
        &self.spec
    }

    /// Feature map right before the output layer, `(B, C_emb, h, w)`.
    pub fn embedding(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = x.clone();
        for (conv, norm) in &self.body {
            y = conv.forward(&y)?;
            if *norm {
                y = instance_norm(&y)?;
            }
            y = leaky_relu(&y, SLOPE)?;
        }
        Ok(y)
    }

    /// Per-patch score matrix `(B, 1, N, N)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.out.forward(&self.embedding(x)?)
    }

    /// Both the embedding and the scores from a single pass.
    pub fn forward_with_embedding(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let emb = self.embedding(x)?;
        let scores = self.out.forward(&emb)?;
        Ok((emb, scores))
    }

    fn layers(&self) -> impl DoubleEndedIterator<Item = &Conv2d> {
        self.body
            .iter()
            .map(|(c, _)| c)
            .chain(std::iter::once(&self.out))
    }

    /// Side length of the score matrix for a square input of side `input`.
    pub fn output_size(&self, input: usize) -> usize {
        self.layers().fold(input, |n, c| {
            (n + 2 * c.pad() - c.kernel()) / c.stride() + 1
        })
    }

    /// Receptive field of one output score, in input pixels.
    pub fn receptive_field(&self) -> usize {
        self.layers()
            .rev()
            .fold(1, |r, c| r * c.stride() + (c.kernel() - c.stride()))
    }
}
