//! Depthwise 2D convolution as a native candle op.
//!
//! candle lowers `groups == channels` into one convolution per channel,
//! which is slow for the narrow per-channel kernels used by separable
//! blocks. These ops run the per-channel stencil directly and provide
//! their own backward pass.

use candle_core::{
    bail, CpuStorage, CustomOp2, DType, Layout, Result, Shape, Tensor, WithDType,
};

fn out_size(size: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (size + 2 * padding - kernel) / stride + 1
}

fn contiguous<'a, T: WithDType>(s: &'a CpuStorage, l: &Layout) -> Result<&'a [T]> {
    let data = s.as_slice::<T>()?;
    match l.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => bail!("depthwise conv expects contiguous operands"),
    }
}

trait Float: WithDType + std::ops::AddAssign + std::ops::Mul<Output = Self> {}
impl Float for f32 {}
impl Float for f64 {}

/// Valid output range `[lo, hi)` along one axis for kernel tap `k`.
fn tap_range(k: usize, stride: usize, padding: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    // need 0 <= o*stride + k - padding < in_len
    let lo = if k >= padding {
        0
    } else {
        (padding - k).div_ceil(stride)
    };
    let hi = if in_len + padding > k {
        ((in_len + padding - k - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    batch: usize,
    channels: usize,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
}

impl Geometry {
    fn visit<F: FnMut(usize, usize, usize, usize)>(&self, mut f: F) {
        // f(input index, output index, ky, kx) within one channel plane
        for ky in 0..self.kh {
            let (y0, y1) = tap_range(ky, self.stride, self.padding, self.in_h, self.out_h);
            for kx in 0..self.kw {
                let (x0, x1) = tap_range(kx, self.stride, self.padding, self.in_w, self.out_w);
                for oy in y0..y1 {
                    let iy = oy * self.stride + ky - self.padding;
                    for ox in x0..x1 {
                        let ix = ox * self.stride + kx - self.padding;
                        f(iy * self.in_w + ix, oy * self.out_w + ox, ky, kx);
                    }
                }
            }
        }
    }
}

fn forward<T: Float>(g: &Geometry, input: &[T], kernel: &[T]) -> Vec<T> {
    let in_plane = g.in_h * g.in_w;
    let out_plane = g.out_h * g.out_w;
    let k_plane = g.kh * g.kw;
    let mut out = vec![T::zero(); g.batch * g.channels * out_plane];
    for b in 0..g.batch {
        for c in 0..g.channels {
            let src = &input[(b * g.channels + c) * in_plane..][..in_plane];
            let dst = &mut out[(b * g.channels + c) * out_plane..][..out_plane];
            let k = &kernel[c * k_plane..][..k_plane];
            g.visit(|i, o, ky, kx| dst[o] += src[i] * k[ky * g.kw + kx]);
        }
    }
    out
}

fn input_grad<T: Float>(g: &Geometry, grad_out: &[T], kernel: &[T]) -> Vec<T> {
    let in_plane = g.in_h * g.in_w;
    let out_plane = g.out_h * g.out_w;
    let k_plane = g.kh * g.kw;
    let mut out = vec![T::zero(); g.batch * g.channels * in_plane];
    for b in 0..g.batch {
        for c in 0..g.channels {
            let go = &grad_out[(b * g.channels + c) * out_plane..][..out_plane];
            let dst = &mut out[(b * g.channels + c) * in_plane..][..in_plane];
            let k = &kernel[c * k_plane..][..k_plane];
            g.visit(|i, o, ky, kx| dst[i] += go[o] * k[ky * g.kw + kx]);
        }
    }
    out
}

fn kernel_grad<T: Float>(g: &Geometry, input: &[T], grad_out: &[T]) -> Vec<T> {
    let in_plane = g.in_h * g.in_w;
    let out_plane = g.out_h * g.out_w;
    let k_plane = g.kh * g.kw;
    let mut out = vec![T::zero(); g.channels * k_plane];
    for b in 0..g.batch {
        for c in 0..g.channels {
            let src = &input[(b * g.channels + c) * in_plane..][..in_plane];
            let go = &grad_out[(b * g.channels + c) * out_plane..][..out_plane];
            let dst = &mut out[c * k_plane..][..k_plane];
            g.visit(|i, o, ky, kx| dst[ky * g.kw + kx] += src[i] * go[o]);
        }
    }
    out
}

macro_rules! dispatch {
    ($s1:expr, $l1:expr, $s2:expr, $l2:expr, $f:ident, $g:expr) => {
        match ($s1, $s2) {
            (CpuStorage::F32(_), CpuStorage::F32(_)) => CpuStorage::F32($f::<f32>(
                $g,
                contiguous($s1, $l1)?,
                contiguous($s2, $l2)?,
            )),
            (CpuStorage::F64(_), CpuStorage::F64(_)) => CpuStorage::F64($f::<f64>(
                $g,
                contiguous($s1, $l1)?,
                contiguous($s2, $l2)?,
            )),
            _ => bail!("depthwise conv supports matching f32 or f64 operands"),
        }
    };
}

/// Forward op: `(input [B,C,H,W], kernel [C,1,K,K]) -> [B,C,H',W']`.
#[derive(Debug, Clone, Copy)]
struct DepthwiseConv {
    stride: usize,
    padding: usize,
}

impl DepthwiseConv {
    fn geometry(&self, input: &Shape, kernel: &Shape) -> Result<Geometry> {
        let (batch, channels, in_h, in_w) = input.dims4()?;
        let (kc, one, kh, kw) = kernel.dims4()?;
        if kc != channels || one != 1 {
            bail!("depthwise kernel {kernel:?} does not match input {input:?}");
        }
        if in_h + 2 * self.padding < kh || in_w + 2 * self.padding < kw {
            bail!("depthwise kernel larger than padded input");
        }
        Ok(Geometry {
            batch,
            channels,
            in_h,
            in_w,
            out_h: out_size(in_h, kh, self.stride, self.padding),
            out_w: out_size(in_w, kw, self.stride, self.padding),
            kh,
            kw,
            stride: self.stride,
            padding: self.padding,
        })
    }
}

impl CustomOp2 for DepthwiseConv {
    fn name(&self) -> &'static str {
        "depthwise-conv2d"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let g = self.geometry(l1.shape(), l2.shape())?;
        let out = dispatch!(s1, l1, s2, l2, forward, &g);
        Ok((out, Shape::from((g.batch, g.channels, g.out_h, g.out_w))))
    }

    fn bwd(
        &self,
        input: &Tensor,
        kernel: &Tensor,
        _res: &Tensor,
        grad_res: &Tensor,
    ) -> Result<(Option<Tensor>, Option<Tensor>)> {
        let g = self.geometry(input.shape(), kernel.shape())?;
        let grad_res = grad_res.contiguous()?;
        let gi = grad_res.apply_op2_no_bwd(&kernel.contiguous()?, &InputGrad(g))?;
        let gk = input.contiguous()?.apply_op2_no_bwd(&grad_res, &KernelGrad(g))?;
        Ok((Some(gi), Some(gk)))
    }
}

struct InputGrad(Geometry);

impl CustomOp2 for InputGrad {
    fn name(&self) -> &'static str {
        "depthwise-conv2d-input-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let out = dispatch!(s1, l1, s2, l2, input_grad, g);
        Ok((out, Shape::from((g.batch, g.channels, g.in_h, g.in_w))))
    }
}

struct KernelGrad(Geometry);

impl CustomOp2 for KernelGrad {
    fn name(&self) -> &'static str {
        "depthwise-conv2d-kernel-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let out = dispatch!(s1, l1, s2, l2, kernel_grad, g);
        Ok((out, Shape::from((g.channels, 1, g.kh, g.kw))))
    }
}

/// Per-channel convolution of `input` `[B,C,H,W]` with `kernel` `[C,1,K,K]`.
pub fn depthwise_conv2d(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    if stride == 0 {
        bail!("stride must be positive");
    }
    match input.dtype() {
        DType::F32 | DType::F64 => {}
        dt => bail!("depthwise conv does not support {dt:?}"),
    }
    input
        .contiguous()?
        .apply_op2(&kernel.contiguous()?, DepthwiseConv { stride, padding })
}
