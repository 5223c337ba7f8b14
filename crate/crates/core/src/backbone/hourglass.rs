//! Stacked hourglass trunk. Intermediate stacks are merged back into the
//! feature stream without intermediate heatmap supervision.

use candle_core::{Module, Result, Tensor};

use crate::nn::{conv_bn, BatchNorm2d, Conv2d, ConvBn, Layer, ParamBuilder};

use super::BackboneConfig;

const HOURGLASS_DEPTH: usize = 4;

/// Pre-activation bottleneck residual.
#[derive(Debug, Clone)]
struct Residual {
    bn1: BatchNorm2d,
    conv1: Conv2d,
    bn2: BatchNorm2d,
    conv2: Conv2d,
    bn3: BatchNorm2d,
    conv3: Conv2d,
    skip: Option<Conv2d>,
}

impl Residual {
    fn new(pb: &ParamBuilder, in_ch: usize, out_ch: usize) -> Result<Self> {
        let mid = (out_ch / 2).max(1);
        Ok(Self {
            bn1: BatchNorm2d::new(&pb.pp("bn1"), in_ch)?,
            conv1: Conv2d::new(&pb.pp("conv1"), in_ch, mid, 1, 1, 0, true)?,
            bn2: BatchNorm2d::new(&pb.pp("bn2"), mid)?,
            conv2: Conv2d::new(&pb.pp("conv2"), mid, mid, 3, 1, 1, true)?,
            bn3: BatchNorm2d::new(&pb.pp("bn3"), mid)?,
            conv3: Conv2d::new(&pb.pp("conv3"), mid, out_ch, 1, 1, 0, true)?,
            skip: if in_ch != out_ch {
                Some(Conv2d::new(&pb.pp("skip"), in_ch, out_ch, 1, 1, 0, true)?)
            } else {
                None
            },
        })
    }
}

impl Layer for Residual {
    fn forward_t(&self, xs: &Tensor, train: bool) -> Result<Tensor> {
        let ys = self.conv1.forward(&self.bn1.forward_t(xs, train)?.relu()?)?;
        let ys = self.conv2.forward(&self.bn2.forward_t(&ys, train)?.relu()?)?;
        let ys = self.conv3.forward(&self.bn3.forward_t(&ys, train)?.relu()?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(xs)?,
            None => xs.clone(),
        };
        ys + skip
    }
}

#[derive(Debug, Clone)]
struct Hourglass {
    up1: Residual,
    low1: Residual,
    inner: Box<HourglassInner>,
    low3: Residual,
}

#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
enum HourglassInner {
    Nested(Hourglass),
    Bottom(Residual),
}

impl Hourglass {
    fn new(pb: &ParamBuilder, depth: usize, features: usize) -> Result<Self> {
        let inner = if depth > 1 {
            HourglassInner::Nested(Hourglass::new(&pb.pp("inner"), depth - 1, features)?)
        } else {
            HourglassInner::Bottom(Residual::new(&pb.pp("bottom"), features, features)?)
        };
        Ok(Self {
            up1: Residual::new(&pb.pp("up1"), features, features)?,
            low1: Residual::new(&pb.pp("low1"), features, features)?,
            inner: Box::new(inner),
            low3: Residual::new(&pb.pp("low3"), features, features)?,
        })
    }
}

impl Layer for Hourglass {
    fn forward_t(&self, xs: &Tensor, train: bool) -> Result<Tensor> {
        let (_, _, h, w) = xs.dims4()?;
        let up1 = self.up1.forward_t(xs, train)?;
        let low = self.low1.forward_t(&xs.max_pool2d(2)?, train)?;
        let low = match self.inner.as_ref() {
            HourglassInner::Nested(hg) => hg.forward_t(&low, train)?,
            HourglassInner::Bottom(r) => r.forward_t(&low, train)?,
        };
        let low = self.low3.forward_t(&low, train)?;
        up1 + low.upsample_nearest2d(h, w)?
    }
}

#[derive(Debug, Clone)]
struct Stack {
    hourglass: Hourglass,
    residual: Residual,
    lin: ConvBn<Conv2d>,
    /// Feature merge into the next stack; absent on the last stack.
    merge: Option<Conv2d>,
}

#[derive(Debug, Clone)]
pub struct StackedHourglass {
    stem: ConvBn<Conv2d>,
    res1: Residual,
    res2: Residual,
    res3: Residual,
    stacks: Vec<Stack>,
    features: usize,
}

impl StackedHourglass {
    pub fn new(pb: &ParamBuilder, cfg: &BackboneConfig) -> Result<Self> {
        let f = cfg.width;
        let stem_ch = cfg.stem_width;
        let stem = {
            let conv = Conv2d::new(&pb.pp("stem.conv"), 3, stem_ch, 7, 2, 3, false)?;
            ConvBn::new(conv, &pb.pp("stem"), stem_ch, true)?
        };
        let mid = (f / 2).max(1);
        let stacks = (0..cfg.stacks)
            .map(|s| {
                let sp = pb.pp(format!("stack.{s}"));
                Ok(Stack {
                    hourglass: Hourglass::new(&sp.pp("hg"), HOURGLASS_DEPTH, f)?,
                    residual: Residual::new(&sp.pp("res"), f, f)?,
                    lin: conv_bn(&sp.pp("lin"), f, f, 1, 1, true)?,
                    merge: if s + 1 < cfg.stacks {
                        Some(Conv2d::new(&sp.pp("merge"), f, f, 1, 1, 0, true)?)
                    } else {
                        None
                    },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            stem,
            res1: Residual::new(&pb.pp("res1"), stem_ch, mid)?,
            res2: Residual::new(&pb.pp("res2"), mid, mid)?,
            res3: Residual::new(&pb.pp("res3"), mid, f)?,
            stacks,
            features: f,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.features
    }
}

impl Layer for StackedHourglass {
    fn forward_t(&self, xs: &Tensor, train: bool) -> Result<Tensor> {
        let x = self.stem.forward_t(xs, train)?;
        let x = self.res1.forward_t(&x, train)?.max_pool2d(2)?;
        let x = self.res2.forward_t(&x, train)?;
        let mut x = self.res3.forward_t(&x, train)?;
        let mut out = None;
        for stack in &self.stacks {
            let y = stack.hourglass.forward_t(&x, train)?;
            let y = stack.residual.forward_t(&y, train)?;
            let y = stack.lin.forward_t(&y, train)?;
            if let Some(merge) = &stack.merge {
                x = (x + merge.forward(&y)?)?;
            }
            out = Some(y);
        }
        Ok(out.expect("at least one stack"))
    }
}
