use candle_core::{Module, Result, Tensor};
use serde::{Deserialize, Serialize};

use crate::nn::{conv_bn, Conv2d, ConvBn, ConvTranspose2d, Layer, ParamBuilder};

/// Upsampling module lifting the stride-4 representation to stride 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpsampleVariant {
    /// A single deconvolution block.
    #[serde(alias = "db")]
    Deconv,
    /// Up-projection unit.
    Upu,
    /// Up, down, up projection chain; still a 2x total scale.
    #[serde(alias = "upu_2stage")]
    Upu2,
}

impl UpsampleVariant {
    pub const ALL: [UpsampleVariant; 3] = [Self::Deconv, Self::Upu, Self::Upu2];

    pub fn key(self) -> &'static str {
        match self {
            Self::Deconv => "deconv",
            Self::Upu => "upu",
            Self::Upu2 => "upu2",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::Deconv => "DB",
            Self::Upu => "UPU",
            Self::Upu2 => "2-stage UPU",
        }
    }
}

/// 1x1 projection to a single heatmap channel.
#[derive(Debug, Clone)]
pub struct HeatmapHead {
    pub conv: Conv2d,
}

impl HeatmapHead {
    pub fn new(pb: &ParamBuilder, in_ch: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(&pb.pp("conv"), in_ch, 1, 1, 1, 0, true)?,
        })
    }
}

impl Module for HeatmapHead {
    fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        self.conv.forward(xs)
    }
}

/// 5x5 stride-2 deconvolution + BN + ReLU, exact 2x output.
pub type Deconv = ConvBn<ConvTranspose2d>;
/// 3x3 stride-2 convolution + BN + ReLU, exact 1/2 output.
pub type ConvDown = ConvBn<Conv2d>;

pub fn deconv(pb: &ParamBuilder, in_ch: usize, out_ch: usize) -> Result<Deconv> {
    let conv = ConvTranspose2d::new(&pb.pp("deconv"), in_ch, out_ch, 5, 2, 2, 1, false)?;
    ConvBn::new(conv, pb, out_ch, true)
}

pub fn conv_down(pb: &ParamBuilder, in_ch: usize, out_ch: usize) -> Result<ConvDown> {
    conv_bn(pb, in_ch, out_ch, 3, 2, true)
}

/// Back-projection up-sampling step:
/// `h0 = Deconv(x)`, `l0 = Conv(h0)`, `e = l0 - P(x)`, `h1 = Deconv(e)`,
/// output `h0 + h1`, where `P` is a 1x1 projection when channel counts
/// differ and the identity otherwise.
#[derive(Debug, Clone)]
pub struct UpProjection {
    pub up1: Deconv,
    pub down: ConvDown,
    pub project: Option<Conv2d>,
    pub up2: Deconv,
}

impl UpProjection {
    pub fn new(pb: &ParamBuilder, in_ch: usize, out_ch: usize) -> Result<Self> {
        Ok(Self {
            up1: deconv(&pb.pp("up1"), in_ch, out_ch)?,
            down: conv_down(&pb.pp("down"), out_ch, out_ch)?,
            project: if in_ch != out_ch {
                Some(Conv2d::new(&pb.pp("project"), in_ch, out_ch, 1, 1, 0, false)?)
            } else {
                None
            },
            up2: deconv(&pb.pp("up2"), out_ch, out_ch)?,
        })
    }
}

impl Layer for UpProjection {
    fn forward_t(&self, xs: &Tensor, train: bool) -> Result<Tensor> {
        let h0 = self.up1.forward_t(xs, train)?;
        let l0 = self.down.forward_t(&h0, train)?;
        let base = match &self.project {
            Some(p) => p.forward(xs)?,
            None => xs.clone(),
        };
        let h1 = self.up2.forward_t(&(l0 - base)?, train)?;
        h0 + h1
    }
}

/// Mirror of [`UpProjection`] that halves resolution.
#[derive(Debug, Clone)]
pub struct DownProjection {
    pub down1: ConvDown,
    pub up: Deconv,
    pub down2: ConvDown,
}

impl DownProjection {
    pub fn new(pb: &ParamBuilder, channels: usize) -> Result<Self> {
        Ok(Self {
            down1: conv_down(&pb.pp("down1"), channels, channels)?,
            up: deconv(&pb.pp("up"), channels, channels)?,
            down2: conv_down(&pb.pp("down2"), channels, channels)?,
        })
    }
}

impl Layer for DownProjection {
    fn forward_t(&self, xs: &Tensor, train: bool) -> Result<Tensor> {
        let l0 = self.down1.forward_t(xs, train)?;
        let h0 = self.up.forward_t(&l0, train)?;
        let l1 = self.down2.forward_t(&(h0 - xs)?, train)?;
        l0 + l1
    }
}

#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum Upsampler {
    Deconv(Deconv),
    Upu(UpProjection),
    Upu2 {
        up1: UpProjection,
        down: DownProjection,
        up2: UpProjection,
    },
}

impl Upsampler {
    pub fn new(pb: &ParamBuilder, variant: UpsampleVariant, channels: usize) -> Result<Self> {
        Ok(match variant {
            UpsampleVariant::Deconv => Self::Deconv(deconv(&pb.pp("block"), channels, channels)?),
            UpsampleVariant::Upu => Self::Upu(UpProjection::new(&pb.pp("upu"), channels, channels)?),
            UpsampleVariant::Upu2 => Self::Upu2 {
                up1: UpProjection::new(&pb.pp("upu1"), channels, channels)?,
                down: DownProjection::new(&pb.pp("down"), channels)?,
                up2: UpProjection::new(&pb.pp("upu2"), channels, channels)?,
            },
        })
    }

    pub fn variant(&self) -> UpsampleVariant {
        match self {
            Self::Deconv(_) => UpsampleVariant::Deconv,
            Self::Upu(_) => UpsampleVariant::Upu,
            Self::Upu2 { .. } => UpsampleVariant::Upu2,
        }
    }
}

impl Layer for Upsampler {
    fn forward_t(&self, xs: &Tensor, train: bool) -> Result<Tensor> {
        match self {
            Self::Deconv(d) => d.forward_t(xs, train),
            Self::Upu(u) => u.forward_t(xs, train),
            Self::Upu2 { up1, down, up2 } => {
                let h = up1.forward_t(xs, train)?;
                let l = down.forward_t(&h, train)?;
                up2.forward_t(&l, train)
            }
        }
    }
}

/// Per-cell (confidence logit, x offset logit, y offset logit).
#[derive(Debug, Clone)]
pub struct CoordHead {
    pub hidden: ConvBn<Conv2d>,
    pub out: Conv2d,
}

impl CoordHead {
    pub fn new(pb: &ParamBuilder, in_ch: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            hidden: conv_bn(&pb.pp("hidden"), in_ch, hidden, 3, 1, true)?,
            out: Conv2d::new(&pb.pp("out"), hidden, 3, 1, 1, 0, true)?,
        })
    }
}

impl Layer for CoordHead {
    fn forward_t(&self, xs: &Tensor, train: bool) -> Result<Tensor> {
        self.out.forward(&self.hidden.forward_t(xs, train)?)
    }
}
