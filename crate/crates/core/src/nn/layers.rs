use candle_core::{Module, Result, Tensor, Var, D};

use super::depthwise::depthwise_conv2d;
use super::params::{Init, ParamBuilder};

/// A layer whose forward pass may differ between training and inference.
pub trait Layer {
    fn forward_t(&self, xs: &Tensor, train: bool) -> Result<Tensor>;
}

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(
        pb: &ParamBuilder,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Result<Self> {
        let fan_in = in_ch * kernel * kernel;
        let weight = pb.get("weight", (out_ch, in_ch, kernel, kernel), Init::KaimingNormal { fan_in })?;
        let bias = if bias {
            Some(pb.get("bias", out_ch, Init::Zeros)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }
}

impl Module for Conv2d {
    fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        let ys = xs.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        match &self.bias {
            Some(b) => ys.broadcast_add(&b.reshape((1, b.elem_count(), 1, 1))?),
            None => Ok(ys),
        }
    }
}

/// Transposed convolution; weight layout `[in, out, k, k]`.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
    pub output_padding: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        pb: &ParamBuilder,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        output_padding: usize,
        bias: bool,
    ) -> Result<Self> {
        let fan_in = out_ch * kernel * kernel;
        let weight = pb.get("weight", (in_ch, out_ch, kernel, kernel), Init::KaimingNormal { fan_in })?;
        let bias = if bias {
            Some(pb.get("bias", out_ch, Init::Zeros)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
            output_padding,
        })
    }
}

impl Module for ConvTranspose2d {
    fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        let ys = xs.conv_transpose2d(&self.weight, self.padding, self.output_padding, self.stride, 1)?;
        match &self.bias {
            Some(b) => ys.broadcast_add(&b.reshape((1, b.elem_count(), 1, 1))?),
            None => Ok(ys),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DepthwiseConv2d {
    pub weight: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl DepthwiseConv2d {
    pub fn new(pb: &ParamBuilder, channels: usize, kernel: usize, stride: usize, padding: usize) -> Result<Self> {
        let weight = pb.get(
            "weight",
            (channels, 1, kernel, kernel),
            Init::KaimingNormal { fan_in: kernel * kernel },
        )?;
        Ok(Self {
            weight,
            stride,
            padding,
        })
    }
}

impl Module for DepthwiseConv2d {
    fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        depthwise_conv2d(xs, &self.weight, self.stride, self.padding)
    }
}

/// Depthwise 3x3 followed by a pointwise 1x1, no expansion and no bias.
#[derive(Debug, Clone)]
pub struct SeparableConv2d {
    pub depthwise: DepthwiseConv2d,
    pub pointwise: Conv2d,
}

impl Module for SeparableConv2d {
    fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        self.pointwise.forward(&self.depthwise.forward(xs)?)
    }
}

/// A 3x3 spatial convolution, either full or depthwise-separable.
#[derive(Debug, Clone)]
pub enum SpatialConv {
    Full(Conv2d),
    Separable(SeparableConv2d),
}

impl SpatialConv {
    pub fn new(pb: &ParamBuilder, in_ch: usize, out_ch: usize, stride: usize, separable: bool) -> Result<Self> {
        if separable {
            Ok(Self::Separable(SeparableConv2d {
                depthwise: DepthwiseConv2d::new(&pb.pp("dw"), in_ch, 3, stride, 1)?,
                pointwise: Conv2d::new(&pb.pp("pw"), in_ch, out_ch, 1, 1, 0, false)?,
            }))
        } else {
            Ok(Self::Full(Conv2d::new(pb, in_ch, out_ch, 3, stride, 1, false)?))
        }
    }
}

impl Module for SpatialConv {
    fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        match self {
            Self::Full(c) => c.forward(xs),
            Self::Separable(c) => c.forward(xs),
        }
    }
}

/// Batch normalization over `[B,C,H,W]`.
///
/// Training mode normalizes with batch statistics and folds them into the
/// running estimates (biased variance for normalization, unbiased for the
/// running estimate).
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub running_mean: Var,
    pub running_var: Var,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new(pb: &ParamBuilder, channels: usize) -> Result<Self> {
        Ok(Self {
            weight: pb.get("weight", channels, Init::Ones)?,
            bias: pb.get("bias", channels, Init::Zeros)?,
            running_mean: pb.buffer("running_mean", channels, Init::Zeros)?,
            running_var: pb.buffer("running_var", channels, Init::Ones)?,
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        })
    }
}

impl Layer for BatchNorm2d {
    fn forward_t(&self, xs: &Tensor, train: bool) -> Result<Tensor> {
        let (b, c, h, w) = xs.dims4()?;
        let (mean, var) = if train {
            let flat = xs.transpose(0, 1)?.reshape((c, b * h * w))?;
            let mean = flat.mean_keepdim(D::Minus1)?;
            let centered = flat.broadcast_sub(&mean)?;
            let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
            let n = (b * h * w) as f64;
            let unbiased = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            let m = self.momentum;
            let new_mean = ((self.running_mean.as_tensor() * (1.0 - m))?
                + (mean.detach().flatten_all()? * m)?)?;
            let new_var = ((self.running_var.as_tensor() * (1.0 - m))?
                + (var.detach().flatten_all()? * (m * unbiased))?)?;
            self.running_mean.set(&new_mean)?;
            self.running_var.set(&new_var)?;
            (mean.reshape((1, c, 1, 1))?, var.reshape((1, c, 1, 1))?)
        } else {
            (
                self.running_mean.as_tensor().reshape((1, c, 1, 1))?,
                self.running_var.as_tensor().reshape((1, c, 1, 1))?,
            )
        };
        let scale = self
            .weight
            .reshape((1, c, 1, 1))?
            .broadcast_div(&(var + self.eps)?.sqrt()?)?;
        xs.broadcast_sub(&mean)?
            .broadcast_mul(&scale)?
            .broadcast_add(&self.bias.reshape((1, c, 1, 1))?)
    }
}

/// Convolution, batch normalization, optional ReLU.
#[derive(Debug, Clone)]
pub struct ConvBn<C> {
    pub conv: C,
    pub bn: BatchNorm2d,
    pub relu: bool,
}

impl<C> ConvBn<C> {
    pub fn new(conv: C, pb: &ParamBuilder, channels: usize, relu: bool) -> Result<Self> {
        Ok(Self {
            conv,
            bn: BatchNorm2d::new(&pb.pp("bn"), channels)?,
            relu,
        })
    }
}

impl<C: Module> Layer for ConvBn<C> {
    fn forward_t(&self, xs: &Tensor, train: bool) -> Result<Tensor> {
        let ys = self.bn.forward_t(&self.conv.forward(xs)?, train)?;
        if self.relu {
            ys.relu()
        } else {
            Ok(ys)
        }
    }
}

/// Plain conv + BN (+ ReLU) with a standard kernel.
pub fn conv_bn(
    pb: &ParamBuilder,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    relu: bool,
) -> Result<ConvBn<Conv2d>> {
    let conv = Conv2d::new(&pb.pp("conv"), in_ch, out_ch, kernel, stride, kernel / 2, false)?;
    ConvBn::new(conv, pb, out_ch, relu)
}
