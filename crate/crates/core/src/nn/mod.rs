//! Minimal layer toolkit on top of candle tensors.

mod depthwise;
mod layers;
mod params;

pub use depthwise::depthwise_conv2d;
pub use layers::{
    conv_bn, BatchNorm2d, Conv2d, ConvBn, ConvTranspose2d, DepthwiseConv2d, Layer,
    SeparableConv2d, SpatialConv, BN_EPS, BN_MOMENTUM,
};
pub use params::{Init, Param, ParamBuilder, ParamGroup, ParamStore};
