//! High-resolution network trunk with parallel multi-resolution branches.
//!
//! Layout follows the pose-estimation HRNet: a stride-4 stem, one stage of
//! bottleneck blocks, then stages with 2, 3 and 4 branches that exchange
//! information through fuse layers. Only the stride-4 branch is returned.

use candle_core::{Result, Tensor};

use crate::nn::{conv_bn, Conv2d, ConvBn, Layer, ParamBuilder, SpatialConv};

use super::BackboneConfig;

const BOTTLENECK_EXPANSION: usize = 4;

#[derive(Debug, Clone)]
struct BasicBlock {
    conv1: ConvBn<SpatialConv>,
    conv2: ConvBn<SpatialConv>,
}

impl BasicBlock {
    fn new(pb: &ParamBuilder, channels: usize, separable: bool) -> Result<Self> {
        let c1 = SpatialConv::new(&pb.pp("conv1"), channels, channels, 1, separable)?;
        let c2 = SpatialConv::new(&pb.pp("conv2"), channels, channels, 1, separable)?;
        Ok(Self {
            conv1: ConvBn::new(c1, &pb.pp("conv1"), channels, true)?,
            conv2: ConvBn::new(c2, &pb.pp("conv2"), channels, false)?,
        })
    }
}

impl Layer for BasicBlock {
    fn forward_t(&self, xs: &Tensor, train: bool) -> Result<Tensor> {
        let ys = self.conv1.forward_t(xs, train)?;
        let ys = self.conv2.forward_t(&ys, train)?;
        (ys + xs)?.relu()
    }
}

#[derive(Debug, Clone)]
struct Bottleneck {
    reduce: ConvBn<Conv2d>,
    spatial: ConvBn<SpatialConv>,
    expand: ConvBn<Conv2d>,
    downsample: Option<ConvBn<Conv2d>>,
}

impl Bottleneck {
    fn new(pb: &ParamBuilder, in_ch: usize, planes: usize, separable: bool) -> Result<Self> {
        let out_ch = planes * BOTTLENECK_EXPANSION;
        let spatial = SpatialConv::new(&pb.pp("conv2"), planes, planes, 1, separable)?;
        Ok(Self {
            reduce: conv_bn(&pb.pp("conv1"), in_ch, planes, 1, 1, true)?,
            spatial: ConvBn::new(spatial, &pb.pp("conv2"), planes, true)?,
            expand: conv_bn(&pb.pp("conv3"), planes, out_ch, 1, 1, false)?,
            downsample: if in_ch != out_ch {
                Some(conv_bn(&pb.pp("downsample"), in_ch, out_ch, 1, 1, false)?)
            } else {
                None
            },
        })
    }
}

impl Layer for Bottleneck {
    fn forward_t(&self, xs: &Tensor, train: bool) -> Result<Tensor> {
        let ys = self.reduce.forward_t(xs, train)?;
        let ys = self.spatial.forward_t(&ys, train)?;
        let ys = self.expand.forward_t(&ys, train)?;
        let residual = match &self.downsample {
            Some(d) => d.forward_t(xs, train)?,
            None => xs.clone(),
        };
        (ys + residual)?.relu()
    }
}

/// Path from branch `from` to branch `to` inside a fuse layer.
#[derive(Debug, Clone)]
enum FusePath {
    Identity,
    /// 1x1 projection then nearest upsampling by `factor`.
    Up { proj: ConvBn<Conv2d>, factor: usize },
    /// Chain of stride-2 3x3 convolutions.
    Down(Vec<ConvBn<Conv2d>>),
}

impl Layer for FusePath {
    fn forward_t(&self, xs: &Tensor, train: bool) -> Result<Tensor> {
        match self {
            Self::Identity => Ok(xs.clone()),
            Self::Up { proj, factor } => {
                let ys = proj.forward_t(xs, train)?;
                let (_, _, h, w) = ys.dims4()?;
                ys.upsample_nearest2d(h * factor, w * factor)
            }
            Self::Down(convs) => {
                let mut ys = xs.clone();
                for c in convs {
                    ys = c.forward_t(&ys, train)?;
                }
                Ok(ys)
            }
        }
    }
}

#[derive(Debug, Clone)]
struct HighResolutionModule {
    branches: Vec<Vec<BasicBlock>>,
    /// `fuse[i][j]` maps branch `j` into output branch `i`.
    fuse: Vec<Vec<FusePath>>,
}

impl HighResolutionModule {
    fn new(
        pb: &ParamBuilder,
        channels: &[usize],
        blocks: usize,
        multi_scale_output: bool,
        separable: bool,
    ) -> Result<Self> {
        let mut branches = Vec::with_capacity(channels.len());
        for (i, &c) in channels.iter().enumerate() {
            let bp = pb.pp(format!("branches.{i}"));
            let branch = (0..blocks)
                .map(|k| BasicBlock::new(&bp.pp(k.to_string()), c, separable))
                .collect::<Result<Vec<_>>>()?;
            branches.push(branch);
        }
        let outputs = if multi_scale_output { channels.len() } else { 1 };
        let mut fuse = Vec::with_capacity(outputs);
        for i in 0..outputs {
            let mut row = Vec::with_capacity(channels.len());
            for j in 0..channels.len() {
                let fp = pb.pp(format!("fuse.{i}.{j}"));
                let path = if j == i {
                    FusePath::Identity
                } else if j > i {
                    FusePath::Up {
                        proj: conv_bn(&fp, channels[j], channels[i], 1, 1, false)?,
                        factor: 1 << (j - i),
                    }
                } else {
                    let steps = i - j;
                    let mut convs = Vec::with_capacity(steps);
                    for k in 0..steps {
                        let last = k + 1 == steps;
                        let out = if last { channels[i] } else { channels[j] };
                        convs.push(conv_bn(&fp.pp(k.to_string()), channels[j], out, 3, 2, !last)?);
                    }
                    FusePath::Down(convs)
                };
                row.push(path);
            }
            fuse.push(row);
        }
        Ok(Self { branches, fuse })
    }

    fn forward_t(&self, xs: &[Tensor], train: bool) -> Result<Vec<Tensor>> {
        let mut outs = Vec::with_capacity(xs.len());
        for (branch, x) in self.branches.iter().zip(xs) {
            let mut y = x.clone();
            for block in branch {
                y = block.forward_t(&y, train)?;
            }
            outs.push(y);
        }
        let mut fused = Vec::with_capacity(self.fuse.len());
        for row in &self.fuse {
            let mut acc: Option<Tensor> = None;
            for (path, y) in row.iter().zip(&outs) {
                let z = path.forward_t(y, train)?;
                acc = Some(match acc {
                    Some(a) => (a + z)?,
                    None => z,
                });
            }
            fused.push(acc.expect("fuse row is non-empty").relu()?);
        }
        Ok(fused)
    }
}

/// Transition into the next stage: existing branches pass through, one new
/// half-resolution branch is spawned from the lowest-resolution input.
#[derive(Debug, Clone)]
struct Transition {
    adapt: Vec<Option<ConvBn<Conv2d>>>,
    spawn: ConvBn<Conv2d>,
}

impl Transition {
    fn new(pb: &ParamBuilder, prev: &[usize], next: &[usize]) -> Result<Self> {
        let adapt = prev
            .iter()
            .zip(next)
            .enumerate()
            .map(|(i, (&p, &n))| {
                if p == n {
                    Ok(None)
                } else {
                    conv_bn(&pb.pp(i.to_string()), p, n, 3, 1, true).map(Some)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let last = *prev.last().expect("at least one branch");
        let spawn = conv_bn(&pb.pp(prev.len().to_string()), last, next[prev.len()], 3, 2, true)?;
        Ok(Self { adapt, spawn })
    }

    fn forward_t(&self, xs: &[Tensor], train: bool) -> Result<Vec<Tensor>> {
        let mut outs = Vec::with_capacity(xs.len() + 1);
        for (adapt, x) in self.adapt.iter().zip(xs) {
            outs.push(match adapt {
                Some(c) => c.forward_t(x, train)?,
                None => x.clone(),
            });
        }
        outs.push(self.spawn.forward_t(xs.last().expect("non-empty"), train)?);
        Ok(outs)
    }
}

#[derive(Debug, Clone)]
pub struct HrNet {
    stem1: ConvBn<Conv2d>,
    stem2: ConvBn<Conv2d>,
    layer1: Vec<Bottleneck>,
    transitions: Vec<Transition>,
    stages: Vec<Vec<HighResolutionModule>>,
    width: usize,
}

impl HrNet {
    pub fn new(pb: &ParamBuilder, cfg: &BackboneConfig) -> Result<Self> {
        let separable = cfg.depthwise;
        let w = cfg.width;
        let stem = cfg.stem_width;
        let stem1 = conv_bn(&pb.pp("stem1"), 3, stem, 3, 2, true)?;
        let stem2 = conv_bn(&pb.pp("stem2"), stem, stem, 3, 2, true)?;

        let mut layer1 = Vec::with_capacity(cfg.stem_blocks);
        let mut in_ch = stem;
        for k in 0..cfg.stem_blocks {
            layer1.push(Bottleneck::new(&pb.pp(format!("layer1.{k}")), in_ch, stem, separable)?);
            in_ch = stem * BOTTLENECK_EXPANSION;
        }

        let mut transitions = Vec::with_capacity(3);
        let mut stages = Vec::with_capacity(3);
        let mut prev = vec![in_ch];
        for (s, &modules) in cfg.stage_modules.iter().enumerate() {
            let branches = s + 2;
            let channels: Vec<usize> = (0..branches).map(|i| w << i).collect();
            let tp = pb.pp(format!("transition{}", s + 1));
            let transition = if s == 0 {
                // The bottleneck output feeds both new branches.
                Transition {
                    adapt: vec![Some(conv_bn(&tp.pp("0"), prev[0], channels[0], 3, 1, true)?)],
                    spawn: conv_bn(&tp.pp("1"), prev[0], channels[1], 3, 2, true)?,
                }
            } else {
                Transition::new(&tp, &prev, &channels)?
            };
            transitions.push(transition);
            let last_stage = s + 1 == cfg.stage_modules.len();
            let stage = (0..modules)
                .map(|m| {
                    let multi = !(last_stage && m + 1 == modules);
                    HighResolutionModule::new(
                        &pb.pp(format!("stage{}.{m}", s + 2)),
                        &channels,
                        cfg.branch_blocks,
                        multi,
                        separable,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            stages.push(stage);
            prev = channels;
        }
        Ok(Self {
            stem1,
            stem2,
            layer1,
            transitions,
            stages,
            width: w,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.width
    }
}

impl Layer for HrNet {
    fn forward_t(&self, xs: &Tensor, train: bool) -> Result<Tensor> {
        let mut x = self.stem1.forward_t(xs, train)?;
        x = self.stem2.forward_t(&x, train)?;
        for block in &self.layer1 {
            x = block.forward_t(&x, train)?;
        }
        let mut branches = vec![x];
        for (transition, stage) in self.transitions.iter().zip(&self.stages) {
            branches = transition.forward_t(&branches, train)?;
            for module in stage {
                branches = module.forward_t(&branches, train)?;
            }
        }
        Ok(branches.swap_remove(0))
    }
}
