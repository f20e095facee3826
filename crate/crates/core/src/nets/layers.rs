//! Small building blocks shared by every network.

use candle_core::{Tensor, D};

use crate::ops;
use crate::params::{join, ParamStore};
use crate::Result;

/// Std of the N(0, σ²) weight init used by the convolutional networks.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Result<Self> {
        Self::with_std(
            store, name, in_ch, out_ch, kernel, stride, pad, bias, INIT_STD,
        )
    }

    /// He-normal init, std `sqrt(2 / fan_in)`, for stacks without normalization.
    #[allow(clippy::too_many_arguments)]
    pub fn new_he(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Result<Self> {
        let std = (2.0 / (in_ch * kernel * kernel) as f64).sqrt();
        Self::with_std(store, name, in_ch, out_ch, kernel, stride, pad, bias, std)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_std(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        std: f64,
    ) -> Result<Self> {
        let weight = store.normal(&join(name, "weight"), (out_ch, in_ch, kernel, kernel), std)?;
        let bias = if bias {
            Some(store.zeros(&join(name, "bias"), out_ch)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            pad,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = ops::conv2d(x, &self.weight, self.stride, self.pad)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?)?,
            None => y,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.dims()[2]
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn pad(&self) -> usize {
        self.pad
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    /// Kaiming-uniform style init: U(-1/√in, 1/√in).
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = store.uniform(&join(name, "weight"), (out_dim, in_dim), bound)?;
        let bias = store.uniform(&join(name, "bias"), out_dim, bound)?;
        Ok(Self { weight, bias })
    }

    /// N(0, std²) weights and zero bias.
    pub fn new_normal(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        std: f64,
    ) -> Result<Self> {
        let weight = store.normal(&join(name, "weight"), (out_dim, in_dim), std)?;
        let bias = store.zeros(&join(name, "bias"), out_dim)?;
        Ok(Self { weight, bias })
    }

    /// `x` is `(batch, in_dim)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }
}

/// Per-sample, per-channel normalization without affine parameters.
pub fn instance_norm(x: &Tensor) -> Result<Tensor> {
    const EPS: f64 = 1e-5;
    let (b, c, h, w) = x.dims4()?;
    let flat = x.reshape((b, c, h * w))?;
    let mean = flat.mean_keepdim(D::Minus1)?;
    let centered = flat.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let y = centered.broadcast_div(&(var + EPS)?.sqrt()?)?;
    Ok(y.reshape((b, c, h, w))?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&(x * slope)?)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    // 1 / (1 + exp(-x)), written with differentiable primitives
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn instance_norm_zero_mean_unit_var() -> Result<()> {
        let x = Tensor::arange(0f64, 32.0, &Device::Cpu)?.reshape((1, 2, 4, 4))?;
        let y = instance_norm(&(x * 3.0)?)?;
        let flat = y.reshape((2, 16))?;
        let mean: Vec<f64> = flat.mean(1)?.to_vec1()?;
        let var: Vec<f64> = flat.sqr()?.mean(1)?.to_vec1()?;
        for (m, v) in mean.iter().zip(&var) {
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-4);
        }
        Ok(())
    }

    #[test]
    fn linear_shapes() -> Result<()> {
        let mut store = ParamStore::new(DType::F32, 0);
        let l = Linear::new(&mut store, "fc", 5, 3)?;
        let y = l.forward(&Tensor::ones((4, 5), DType::F32, &Device::Cpu)?)?;
        assert_eq!(y.dims(), &[4, 3]);
        Ok(())
    }

    #[test]
    fn leaky_relu_values() -> Result<()> {
        let x = Tensor::new(&[-2.0f64, 0.0, 3.0], &Device::Cpu)?;
        let y: Vec<f64> = leaky_relu(&x, 0.2)?.to_vec1()?;
        assert_eq!(y, vec![-0.4, 0.0, 3.0]);
        let s: Vec<f64> = sigmoid(&Tensor::new(&[0.0f64], &Device::Cpu)?)?.to_vec1()?;
        assert_eq!(s, vec![0.5]);
        Ok(())
    }
}
