//! CPU tensor kernels that back the network layers.
//!
//! Convolution is lowered to im2col + GEMM and nearest upsampling is a plain
//! copy; both register their own backward passes with candle so the rest of
//! the autograd graph stays untouched. Kernels are single-threaded and
//! deterministic: the same inputs always produce the same bits.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, Layout, Result, Shape, Tensor};

trait Elem: Copy + Default + std::ops::AddAssign + 'static {
    const ONE: Self;
}

impl Elem for f32 {
    const ONE: Self = 1.0;
}

impl Elem for f64 {
    const ONE: Self = 1.0;
}

fn contiguous_slice<'a, T>(data: &'a [T], layout: &Layout, op: &str) -> Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("{op}: expected a contiguous input"),
    }
}

/// `dst (m x n, row-major) = [dst +] lhs (m x k) * rhs (k x n)`, strides given as (row, col).
#[allow(clippy::too_many_arguments)]
fn matmul_into<T: Elem>(
    m: usize,
    n: usize,
    k: usize,
    dst: &mut [T],
    accumulate: bool,
    lhs: &[T],
    lhs_strides: (isize, isize),
    rhs: &[T],
    rhs_strides: (isize, isize),
) {
    debug_assert!(dst.len() >= m * n);
    // SAFETY: every index reachable through the given strides lies inside the
    // slices; callers size the buffers from the same (m, n, k).
    unsafe {
        gemm::gemm(
            m,
            n,
            k,
            dst.as_mut_ptr(),
            1,
            n as isize,
            accumulate,
            lhs.as_ptr(),
            lhs_strides.1,
            lhs_strides.0,
            rhs.as_ptr(),
            rhs_strides.1,
            rhs_strides.0,
            T::ONE,
            T::ONE,
            false,
            false,
            false,
            gemm::Parallelism::None,
        )
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    fn new(
        channels: usize,
        height: usize,
        width: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if height + 2 * pad < kernel || width + 2 * pad < kernel {
            candle_core::bail!(
                "conv2d: kernel {kernel} larger than padded input {height}x{width}+{pad}"
            );
        }
        Ok(Self {
            channels,
            height,
            width,
            kernel,
            stride,
            pad,
            out_h: (height + 2 * pad - kernel) / stride + 1,
            out_w: (width + 2 * pad - kernel) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Source column for output column `ox` at kernel offset `kx`, if in bounds.
    #[inline]
    fn src_x(&self, ox: usize, kx: usize) -> Option<usize> {
        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
        (ix >= 0 && (ix as usize) < self.width).then_some(ix as usize)
    }

    #[inline]
    fn src_y(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
        (iy >= 0 && (iy as usize) < self.height).then_some(iy as usize)
    }

    fn im2col<T: Elem>(&self, x: &[T], cols: &mut [T]) {
        let k = self.kernel;
        let (ho, wo) = (self.out_h, self.out_w);
        for c in 0..self.channels {
            let plane = &x[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let d = &mut dst[oy * wo..(oy + 1) * wo];
                        let Some(iy) = self.src_y(oy, ky) else {
                            d.fill(T::default());
                            continue;
                        };
                        let src = &plane[iy * self.width..(iy + 1) * self.width];
                        if self.stride == 1 {
                            // contiguous run with zero borders
                            let lo = self.pad.saturating_sub(kx).min(wo);
                            let hi = (self.width + self.pad).saturating_sub(kx).min(wo).max(lo);
                            d[..lo].fill(T::default());
                            d[hi..].fill(T::default());
                            let s0 = lo + kx - self.pad;
                            d[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                        } else {
                            for (ox, v) in d.iter_mut().enumerate() {
                                *v = match self.src_x(ox, kx) {
                                    Some(ix) => src[ix],
                                    None => T::default(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Elem>(&self, cols: &[T], dx: &mut [T]) {
        let k = self.kernel;
        let (ho, wo) = (self.out_h, self.out_w);
        for c in 0..self.channels {
            let plane = &mut dx[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let Some(iy) = self.src_y(oy, ky) else {
                            continue;
                        };
                        let d = &mut plane[iy * self.width..(iy + 1) * self.width];
                        let s = &src[oy * wo..(oy + 1) * wo];
                        if self.stride == 1 {
                            let lo = self.pad.saturating_sub(kx).min(wo);
                            let hi = (self.width + self.pad).saturating_sub(kx).min(wo).max(lo);
                            let d0 = lo + kx - self.pad;
                            for (dv, sv) in d[d0..d0 + (hi - lo)].iter_mut().zip(&s[lo..hi]) {
                                *dv += *sv;
                            }
                        } else {
                            for (ox, sv) in s.iter().enumerate() {
                                if let Some(ix) = self.src_x(ox, kx) {
                                    d[ix] += *sv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

struct Conv2dOp {
    stride: usize,
    pad: usize,
}

fn conv_forward<T: Elem>(x: &[T], w: &[T], batch: usize, out_ch: usize, g: &ConvGeom) -> Vec<T> {
    let (kk, hw) = (g.patch_len(), g.out_len());
    let mut cols = vec![T::default(); kk * hw];
    let mut out = vec![T::default(); batch * out_ch * hw];
    for b in 0..batch {
        g.im2col(&x[b * g.in_len()..(b + 1) * g.in_len()], &mut cols);
        matmul_into(
            out_ch,
            hw,
            kk,
            &mut out[b * out_ch * hw..(b + 1) * out_ch * hw],
            false,
            w,
            (kk as isize, 1),
            &cols,
            (hw as isize, 1),
        );
    }
    out
}

impl CustomOp2 for Conv2dOp {
    fn name(&self) -> &'static str {
        "pseudoseg-conv2d"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let (batch, c, h, w) = l1.shape().dims4()?;
        let (out_ch, c2, kh, kw) = l2.shape().dims4()?;
        if c != c2 || kh != kw {
            candle_core::bail!(
                "conv2d: input {:?} incompatible with kernel {:?}",
                l1.shape(),
                l2.shape()
            );
        }
        let g = ConvGeom::new(c, h, w, kh, self.stride, self.pad)?;
        let shape = Shape::from((batch, out_ch, g.out_h, g.out_w));
        let storage = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(k)) => CpuStorage::F32(conv_forward(
                contiguous_slice(x, l1, "conv2d")?,
                contiguous_slice(k, l2, "conv2d")?,
                batch,
                out_ch,
                &g,
            )),
            (CpuStorage::F64(x), CpuStorage::F64(k)) => CpuStorage::F64(conv_forward(
                contiguous_slice(x, l1, "conv2d")?,
                contiguous_slice(k, l2, "conv2d")?,
                batch,
                out_ch,
                &g,
            )),
            _ => candle_core::bail!("conv2d: only f32/f64 with matching dtypes are supported"),
        };
        Ok((storage, shape))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> Result<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let (_, _, h, wd) = x.dims4()?;
        let (_, _, k, _) = w.dims4()?;
        let gx = grad.apply_op2_no_bwd(
            w,
            &ConvInputGrad {
                stride: self.stride,
                pad: self.pad,
                height: h,
                width: wd,
            },
        )?;
        let gw = x.apply_op2_no_bwd(
            &grad,
            &ConvWeightGrad {
                stride: self.stride,
                pad: self.pad,
                kernel: k,
            },
        )?;
        Ok((Some(gx), Some(gw)))
    }
}

struct ConvInputGrad {
    stride: usize,
    pad: usize,
    height: usize,
    width: usize,
}

fn conv_input_grad<T: Elem>(
    dy: &[T],
    w: &[T],
    batch: usize,
    out_ch: usize,
    g: &ConvGeom,
) -> Vec<T> {
    let (kk, hw) = (g.patch_len(), g.out_len());
    let mut cols = vec![T::default(); kk * hw];
    let mut dx = vec![T::default(); batch * g.in_len()];
    for b in 0..batch {
        // cols (kk x hw) = w^T (kk x out_ch) * dy_b (out_ch x hw)
        matmul_into(
            kk,
            hw,
            out_ch,
            &mut cols,
            false,
            w,
            (1, kk as isize),
            &dy[b * out_ch * hw..(b + 1) * out_ch * hw],
            (hw as isize, 1),
        );
        g.col2im(&cols, &mut dx[b * g.in_len()..(b + 1) * g.in_len()]);
    }
    dx
}

impl CustomOp2 for ConvInputGrad {
    fn name(&self) -> &'static str {
        "pseudoseg-conv2d-grad-input"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let (batch, out_ch, _, _) = l1.shape().dims4()?;
        let (_, c, k, _) = l2.shape().dims4()?;
        let g = ConvGeom::new(c, self.height, self.width, k, self.stride, self.pad)?;
        let shape = Shape::from((batch, c, self.height, self.width));
        let storage = match (s1, s2) {
            (CpuStorage::F32(dy), CpuStorage::F32(w)) => CpuStorage::F32(conv_input_grad(
                contiguous_slice(dy, l1, "conv2d-grad")?,
                contiguous_slice(w, l2, "conv2d-grad")?,
                batch,
                out_ch,
                &g,
            )),
            (CpuStorage::F64(dy), CpuStorage::F64(w)) => CpuStorage::F64(conv_input_grad(
                contiguous_slice(dy, l1, "conv2d-grad")?,
                contiguous_slice(w, l2, "conv2d-grad")?,
                batch,
                out_ch,
                &g,
            )),
            _ => candle_core::bail!("conv2d-grad: unsupported dtype"),
        };
        Ok((storage, shape))
    }
}

struct ConvWeightGrad {
    stride: usize,
    pad: usize,
    kernel: usize,
}

fn conv_weight_grad<T: Elem>(
    x: &[T],
    dy: &[T],
    batch: usize,
    out_ch: usize,
    g: &ConvGeom,
) -> Vec<T> {
    let (kk, hw) = (g.patch_len(), g.out_len());
    let mut cols = vec![T::default(); kk * hw];
    let mut dw = vec![T::default(); out_ch * kk];
    for b in 0..batch {
        g.im2col(&x[b * g.in_len()..(b + 1) * g.in_len()], &mut cols);
        // dw (out_ch x kk) += dy_b (out_ch x hw) * cols^T (hw x kk)
        matmul_into(
            out_ch,
            kk,
            hw,
            &mut dw,
            b > 0,
            &dy[b * out_ch * hw..(b + 1) * out_ch * hw],
            (hw as isize, 1),
            &cols,
            (1, hw as isize),
        );
    }
    dw
}

impl CustomOp2 for ConvWeightGrad {
    fn name(&self) -> &'static str {
        "pseudoseg-conv2d-grad-weight"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let (batch, c, h, w) = l1.shape().dims4()?;
        let (_, out_ch, _, _) = l2.shape().dims4()?;
        let g = ConvGeom::new(c, h, w, self.kernel, self.stride, self.pad)?;
        let shape = Shape::from((out_ch, c, self.kernel, self.kernel));
        let storage = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(dy)) => CpuStorage::F32(conv_weight_grad(
                contiguous_slice(x, l1, "conv2d-grad")?,
                contiguous_slice(dy, l2, "conv2d-grad")?,
                batch,
                out_ch,
                &g,
            )),
            (CpuStorage::F64(x), CpuStorage::F64(dy)) => CpuStorage::F64(conv_weight_grad(
                contiguous_slice(x, l1, "conv2d-grad")?,
                contiguous_slice(dy, l2, "conv2d-grad")?,
                batch,
                out_ch,
                &g,
            )),
            _ => candle_core::bail!("conv2d-grad: unsupported dtype"),
        };
        Ok((storage, shape))
    }
}

/// 2-D cross-correlation with square kernel and symmetric zero padding.
///
/// `x` is `(batch, in_ch, h, w)`, `weight` is `(out_ch, in_ch, k, k)`.
pub fn conv2d(x: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    if stride == 0 {
        candle_core::bail!("conv2d: stride must be positive");
    }
    x.contiguous()?
        .apply_op2(&weight.contiguous()?, Conv2dOp { stride, pad })
}

struct Upsample2x;

fn upsample2x<T: Elem>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let mut out = vec![T::default(); planes * 4 * h * w];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
        for y in 0..h {
            let row = &src[y * w..(y + 1) * w];
            let d0 = &mut dst[(2 * y) * 2 * w..(2 * y + 1) * 2 * w];
            for (x, &v) in row.iter().enumerate() {
                d0[2 * x] = v;
                d0[2 * x + 1] = v;
            }
            dst.copy_within((2 * y) * 2 * w..(2 * y + 1) * 2 * w, (2 * y + 1) * 2 * w);
        }
    }
    out
}

impl CustomOp1 for Upsample2x {
    fn name(&self) -> &'static str {
        "pseudoseg-upsample2x"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = l.shape().dims4()?;
        let shape = Shape::from((b, c, 2 * h, 2 * w));
        let storage = match s {
            CpuStorage::F32(v) => {
                CpuStorage::F32(upsample2x(contiguous_slice(v, l, "upsample")?, b * c, h, w))
            }
            CpuStorage::F64(v) => {
                CpuStorage::F64(upsample2x(contiguous_slice(v, l, "upsample")?, b * c, h, w))
            }
            _ => candle_core::bail!("upsample2x: unsupported dtype"),
        };
        Ok((storage, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&SumPool2x)?))
    }
}

struct SumPool2x;

fn sum_pool2x<T: Elem>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![T::default(); planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = src[2 * y * w + 2 * x];
                acc += src[2 * y * w + 2 * x + 1];
                acc += src[(2 * y + 1) * w + 2 * x];
                acc += src[(2 * y + 1) * w + 2 * x + 1];
                dst[y * ow + x] = acc;
            }
        }
    }
    out
}

impl CustomOp1 for SumPool2x {
    fn name(&self) -> &'static str {
        "pseudoseg-sumpool2x"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = l.shape().dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            candle_core::bail!("sumpool2x: odd spatial size {h}x{w}");
        }
        let shape = Shape::from((b, c, h / 2, w / 2));
        let storage = match s {
            CpuStorage::F32(v) => {
                CpuStorage::F32(sum_pool2x(contiguous_slice(v, l, "sumpool")?, b * c, h, w))
            }
            CpuStorage::F64(v) => {
                CpuStorage::F64(sum_pool2x(contiguous_slice(v, l, "sumpool")?, b * c, h, w))
            }
            _ => candle_core::bail!("sumpool2x: unsupported dtype"),
        };
        Ok((storage, shape))
    }
}

/// Nearest-neighbour upsampling by a factor of two in both spatial dims.
pub fn upsample_nearest2x(x: &Tensor) -> Result<Tensor> {
    x.contiguous()?.apply_op1(Upsample2x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};

    fn naive_conv(
        x: &[f64],
        w: &[f64],
        dims: (usize, usize, usize, usize),
        oc: usize,
        k: usize,
        s: usize,
        p: usize,
    ) -> Vec<f64> {
        let (b, c, h, wd) = dims;
        let ho = (h + 2 * p - k) / s + 1;
        let wo = (wd + 2 * p - k) / s + 1;
        let mut out = vec![0.0; b * oc * ho * wo];
        for bi in 0..b {
            for o in 0..oc {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * s + ky) as isize - p as isize;
                                    let ix = (ox * s + kx) as isize - p as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += x[((bi * c + ci) * h + iy as usize) * wd + ix as usize]
                                        * w[((o * c + ci) * k + ky) * k + kx];
                                }
                            }
                        }
                        out[((bi * oc + o) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn seq(n: usize, scale: f64) -> Vec<f64> {
        (0..n)
            .map(|i| ((i * 7919 % 97) as f64 / 97.0 - 0.5) * scale)
            .collect()
    }

    #[test]
    fn conv_matches_naive_loops() -> Result<()> {
        let dev = Device::Cpu;
        for &(b, c, h, w, oc, k, s, p) in &[
            (1, 3, 9, 7, 4, 3, 1, 1),
            (2, 2, 8, 8, 3, 4, 2, 1),
            (1, 5, 6, 6, 2, 1, 1, 0),
            (2, 3, 11, 10, 5, 3, 2, 1),
            (1, 1, 5, 5, 1, 4, 1, 2),
        ] {
            let xv = seq(b * c * h * w, 2.0);
            let wv = seq(oc * c * k * k, 1.0);
            let x = Tensor::from_vec(xv.clone(), (b, c, h, w), &dev)?;
            let wt = Tensor::from_vec(wv.clone(), (oc, c, k, k), &dev)?;
            let got: Vec<f64> = conv2d(&x, &wt, s, p)?.flatten_all()?.to_vec1()?;
            let want = naive_conv(&xv, &wv, (b, c, h, w), oc, k, s, p);
            assert_eq!(got.len(), want.len());
            for (g, e) in got.iter().zip(&want) {
                assert!((g - e).abs() < 1e-12, "{g} vs {e}");
            }
        }
        Ok(())
    }

    #[test]
    fn conv_backward_matches_finite_differences() -> Result<()> {
        let dev = Device::Cpu;
        let (b, c, h, w, oc, k, s, p) = (2, 2, 6, 5, 3, 3, 2, 1);
        let xv = seq(b * c * h * w, 2.0);
        let wv = seq(oc * c * k * k, 1.0);
        let x = Var::from_tensor(&Tensor::from_vec(xv.clone(), (b, c, h, w), &dev)?)?;
        let wt = Var::from_tensor(&Tensor::from_vec(wv.clone(), (oc, c, k, k), &dev)?)?;
        let y = conv2d(x.as_tensor(), wt.as_tensor(), s, p)?;
        let probe = Tensor::from_vec(seq(y.elem_count(), 3.0), y.shape(), &dev)?;
        let grads = (y * &probe)?.sum_all()?.backward()?;
        let gx: Vec<f64> = grads.get(&x).unwrap().flatten_all()?.to_vec1()?;
        let gw: Vec<f64> = grads.get(&wt).unwrap().flatten_all()?.to_vec1()?;
        let pv: Vec<f64> = probe.flatten_all()?.to_vec1()?;
        let objective = |xv: &[f64], wv: &[f64]| -> f64 {
            naive_conv(xv, wv, (b, c, h, w), oc, k, s, p)
                .iter()
                .zip(&pv)
                .map(|(a, b)| a * b)
                .sum()
        };
        let eps = 1e-6;
        for i in 0..xv.len() {
            let (mut up, mut dn) = (xv.clone(), xv.clone());
            up[i] += eps;
            dn[i] -= eps;
            let fd = (objective(&up, &wv) - objective(&dn, &wv)) / (2.0 * eps);
            assert!((fd - gx[i]).abs() < 1e-6, "dx[{i}] {fd} vs {}", gx[i]);
        }
        for i in 0..wv.len() {
            let (mut up, mut dn) = (wv.clone(), wv.clone());
            up[i] += eps;
            dn[i] -= eps;
            let fd = (objective(&xv, &up) - objective(&xv, &dn)) / (2.0 * eps);
            assert!((fd - gw[i]).abs() < 1e-6, "dw[{i}] {fd} vs {}", gw[i]);
        }
        Ok(())
    }

    #[test]
    fn upsample_and_its_gradient() -> Result<()> {
        let dev = Device::Cpu;
        let x = Var::from_tensor(&Tensor::arange(0f32, 8.0, &dev)?.reshape((1, 2, 2, 2))?)?;
        let y = upsample_nearest2x(x.as_tensor())?;
        assert_eq!(y.dims4()?, (1, 2, 4, 4));
        let row: Vec<f32> = y.get(0)?.get(1)?.get(3)?.to_vec1()?;
        assert_eq!(row, vec![6.0, 6.0, 7.0, 7.0]);
        let weights = Tensor::arange(0f32, 32.0, &dev)?.reshape((1, 2, 4, 4))?;
        let grads = (y * &weights)?.sum_all()?.backward()?;
        let g: Vec<f32> = grads.get(&x).unwrap().flatten_all()?.to_vec1()?;
        // top-left block of the first plane covers weights 0, 1, 4, 5
        assert_eq!(g[0], 10.0);
        assert_eq!(g.len(), 8);
        assert_eq!(x.dtype(), DType::F32);
        Ok(())
    }
}
