//! Feature extractors producing a stride-4 feature map.
//!
//! Three trunks are available: the depthwise-separable HRNet used by the
//! detector, the unmodified HRNet, and a four-stack hourglass. All of them
//! return `[B, C, S/4, S/4]` for a `[B, 3, S, S]` input so the heads never
//! need to know which trunk produced their input.

mod hourglass;
mod hrnet;

use candle_core::{Result as TensorResult, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Layer, ParamBuilder, ParamGroup, ParamStore};

pub use hourglass::StackedHourglass;
pub use hrnet::HrNet;

/// Total stride of the deepest HRNet branch.
pub const MAX_STRIDE: usize = 32;
/// Stride of the trunk output consumed by the heads.
pub const FEATURE_STRIDE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BackboneKind {
    #[serde(rename = "hrnet48m", alias = "HRNET48_M")]
    HrNet48M,
    #[serde(rename = "hrnet48", alias = "HRNET48")]
    HrNet48,
    #[serde(rename = "hourglass4", alias = "hg4", alias = "HOURGLASS4")]
    Hourglass4,
}

impl BackboneKind {
    pub const ALL: [BackboneKind; 3] = [Self::Hourglass4, Self::HrNet48, Self::HrNet48M];

    pub fn label(self) -> &'static str {
        match self {
            Self::HrNet48M => "HRNet-48-M",
            Self::HrNet48 => "HRNet-48",
            Self::Hourglass4 => "Hg4",
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            Self::HrNet48M => "hrnet48m",
            Self::HrNet48 => "hrnet48",
            Self::Hourglass4 => "hourglass4",
        }
    }

    fn default_width(self) -> usize {
        match self {
            Self::HrNet48M | Self::HrNet48 => 48,
            Self::Hourglass4 => 256,
        }
    }
}

/// Trunk configuration.
///
/// `width` is the HRNet stride-4 branch width, or the hourglass feature
/// count. The remaining depth knobs default to the full-size networks and
/// exist so small variants can be trained on a CPU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBackboneConfig")]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub input_size: usize,
    pub width: usize,
    pub stacks: usize,
    pub depthwise: bool,
    pub stem_width: usize,
    /// Bottleneck blocks in the first HRNet stage.
    pub stem_blocks: usize,
    /// Basic blocks per branch inside each HRNet module.
    pub branch_blocks: usize,
    /// HRNet modules in stages 2, 3 and 4.
    pub stage_modules: [usize; 3],
}

impl BackboneConfig {
    pub fn new(kind: BackboneKind) -> Self {
        Self {
            kind,
            input_size: 320,
            width: kind.default_width(),
            stacks: 4,
            depthwise: kind == BackboneKind::HrNet48M,
            stem_width: 64,
            stem_blocks: 4,
            branch_blocks: 4,
            stage_modules: [1, 4, 3],
        }
    }

    /// The same size knobs applied to another trunk kind. Width is rescaled
    /// by the ratio of the two kinds' full-size widths.
    pub fn with_kind(&self, kind: BackboneKind) -> Self {
        let width = (self.width * kind.default_width() + self.kind.default_width() / 2)
            / self.kind.default_width();
        Self {
            kind,
            width: width.max(1),
            depthwise: kind == BackboneKind::HrNet48M,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || !self.input_size.is_multiple_of(MAX_STRIDE) {
            return Err(Error::config(format!(
                "model.backbone.input_size must be a positive multiple of {MAX_STRIDE}, got {}",
                self.input_size
            )));
        }
        if self.width == 0 {
            return Err(Error::config("model.backbone.width must be positive"));
        }
        if self.stacks == 0 {
            return Err(Error::config("model.backbone.stacks must be positive"));
        }
        if self.stem_width == 0 || self.stem_blocks == 0 || self.branch_blocks == 0 {
            return Err(Error::config("model.backbone depth knobs must be positive"));
        }
        if self.stage_modules.contains(&0) {
            return Err(Error::config("model.backbone.stage_modules entries must be positive"));
        }
        if self.depthwise != (self.kind == BackboneKind::HrNet48M) {
            return Err(Error::config(format!(
                "model.backbone.depthwise = {} is inconsistent with kind {}",
                self.depthwise,
                self.kind.key()
            )));
        }
        Ok(())
    }

    pub fn feature_size(&self) -> usize {
        self.input_size / FEATURE_STRIDE
    }
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::new(BackboneKind::HrNet48M)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBackboneConfig {
    kind: Option<BackboneKind>,
    input_size: Option<usize>,
    width: Option<usize>,
    stacks: Option<usize>,
    depthwise: Option<bool>,
    stem_width: Option<usize>,
    stem_blocks: Option<usize>,
    branch_blocks: Option<usize>,
    stage_modules: Option<[usize; 3]>,
}

impl TryFrom<RawBackboneConfig> for BackboneConfig {
    type Error = Error;

    fn try_from(raw: RawBackboneConfig) -> Result<Self> {
        let base = BackboneConfig::new(raw.kind.unwrap_or(BackboneKind::HrNet48M));
        let cfg = BackboneConfig {
            input_size: raw.input_size.unwrap_or(base.input_size),
            width: raw.width.unwrap_or(base.width),
            stacks: raw.stacks.unwrap_or(base.stacks),
            depthwise: raw.depthwise.unwrap_or(base.depthwise),
            stem_width: raw.stem_width.unwrap_or(base.stem_width),
            stem_blocks: raw.stem_blocks.unwrap_or(base.stem_blocks),
            branch_blocks: raw.branch_blocks.unwrap_or(base.branch_blocks),
            stage_modules: raw.stage_modules.unwrap_or(base.stage_modules),
            ..base
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Backbone output: `[B, C, S/4, S/4]`.
#[derive(Debug, Clone)]
pub struct FeatureMap(pub Tensor);

impl FeatureMap {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn channels(&self) -> usize {
        self.0.dims()[1]
    }

    pub fn height(&self) -> usize {
        self.0.dims()[2]
    }

    pub fn width(&self) -> usize {
        self.0.dims()[3]
    }
}

#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
enum Trunk {
    HrNet(HrNet),
    Hourglass(StackedHourglass),
}

#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    trunk: Trunk,
    config: BackboneConfig,
    store: ParamStore,
    prefix: String,
}

impl FeatureExtractor {
    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn out_channels(&self) -> usize {
        match &self.trunk {
            Trunk::HrNet(n) => n.out_channels(),
            Trunk::Hourglass(n) => n.out_channels(),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.store.parameter_count(&self.prefix)
    }

    pub fn forward_t(&self, images: &Tensor, train: bool) -> Result<FeatureMap> {
        let (_, c, h, w) = images.dims4()?;
        let s = self.config.input_size;
        if c != 3 || h != s || w != s {
            return Err(Error::shape(format!(
                "backbone expects [B, 3, {s}, {s}] input, got {:?}",
                images.dims()
            )));
        }
        Ok(FeatureMap(self.trunk_forward(images, train)?))
    }

    fn trunk_forward(&self, xs: &Tensor, train: bool) -> TensorResult<Tensor> {
        match &self.trunk {
            Trunk::HrNet(n) => n.forward_t(xs, train),
            Trunk::Hourglass(n) => n.forward_t(xs, train),
        }
    }
}

/// Builds the trunk under `pb`, registering parameters in the backbone group.
pub fn build_backbone(config: &BackboneConfig, pb: &ParamBuilder) -> Result<FeatureExtractor> {
    config.validate()?;
    let pb = pb.with_group(ParamGroup::Backbone);
    let trunk = match config.kind {
        BackboneKind::HrNet48M | BackboneKind::HrNet48 => Trunk::HrNet(HrNet::new(&pb, config)?),
        BackboneKind::Hourglass4 => Trunk::Hourglass(StackedHourglass::new(&pb, config)?),
    };
    Ok(FeatureExtractor {
        trunk,
        config: config.clone(),
        store: pb.store().clone(),
        prefix: pb.prefix().to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    pub(crate) fn tiny(kind: BackboneKind) -> BackboneConfig {
        BackboneConfig {
            input_size: 64,
            width: if kind == BackboneKind::Hourglass4 { 16 } else { 4 },
            stacks: 2,
            stem_width: 8,
            stem_blocks: 1,
            branch_blocks: 1,
            stage_modules: [1, 1, 1],
            ..BackboneConfig::new(kind)
        }
    }

    #[test]
    fn shape_law_small_inputs() {
        for kind in BackboneKind::ALL {
            for size in [64, 128] {
                let cfg = BackboneConfig {
                    input_size: size,
                    ..tiny(kind)
                };
                let store = ParamStore::cpu(DType::F32, 0);
                let bb = build_backbone(&cfg, &store.root(ParamGroup::Backbone).pp("backbone")).unwrap();
                let x = Tensor::zeros((1, 3, size, size), DType::F32, &Device::Cpu).unwrap();
                let f = bb.forward_t(&x, false).unwrap();
                assert_eq!((f.height(), f.width()), (size / 4, size / 4), "{kind:?}");
                assert_eq!(f.channels(), cfg.width);
            }
        }
    }

    #[test]
    fn rejects_invalid_configs() {
        let cfg = BackboneConfig {
            input_size: 100,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let mut cfg = BackboneConfig::new(BackboneKind::HrNet48);
        cfg.depthwise = true;
        assert!(cfg.validate().is_err());
        let cfg = BackboneConfig {
            width: 0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let mut cfg = BackboneConfig::new(BackboneKind::Hourglass4);
        cfg.stacks = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn deserializes_with_kind_dependent_defaults() {
        let cfg: BackboneConfig = toml::from_str("kind = \"hg4\"").unwrap();
        assert_eq!(cfg.width, 256);
        assert!(!cfg.depthwise);
        let cfg: BackboneConfig = toml::from_str("kind = \"hrnet48\"\ninput_size = 128").unwrap();
        assert_eq!((cfg.width, cfg.input_size, cfg.depthwise), (48, 128, false));
        assert!(toml::from_str::<BackboneConfig>("input_size = 330").is_err());
        assert!(toml::from_str::<BackboneConfig>("kind = \"hrnet48\"\ndepthwise = true").is_err());
        let back: BackboneConfig = toml::from_str(&toml::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn depthwise_reduces_parameters() {
        let count = |kind| {
            let store = ParamStore::cpu(DType::F32, 0);
            let cfg = BackboneConfig {
                width: 8,
                ..tiny(kind)
            };
            build_backbone(&cfg, &store.root(ParamGroup::Backbone)).unwrap().parameter_count()
        };
        assert!(count(BackboneKind::HrNet48M) < count(BackboneKind::HrNet48));
    }

    #[test]
    fn seeded_construction_is_deterministic() {
        let build = |seed| {
            let store = ParamStore::cpu(DType::F32, seed);
            let bb = build_backbone(&tiny(BackboneKind::HrNet48M), &store.root(ParamGroup::Backbone)).unwrap();
            let x = Tensor::ones((1, 3, 64, 64), DType::F32, &Device::Cpu).unwrap();
            bb.forward_t(&x, false).unwrap().0.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        };
        assert_eq!(build(5), build(5));
        assert_ne!(build(5), build(6));
    }

    #[test]
    fn rejects_wrong_input_shape() {
        let store = ParamStore::cpu(DType::F32, 0);
        let bb = build_backbone(&tiny(BackboneKind::HrNet48), &store.root(ParamGroup::Backbone)).unwrap();
        let x = Tensor::zeros((1, 3, 32, 32), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(bb.forward_t(&x, false), Err(Error::Shape(_))));
    }
}
