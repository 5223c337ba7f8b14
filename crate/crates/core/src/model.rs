//! The full detector: trunk, quarter head, half-scale branch, coordinate head.

use candle_core::{DType, Device, Module, Tensor};
use serde::{Deserialize, Serialize};

use crate::backbone::{build_backbone, BackboneConfig, FeatureExtractor, FeatureMap};
use crate::error::{Error, Result};
use crate::heads::{
    decode, decode_heatmap, CoordHead, GridPrediction, HalfBranch, Heatmap, HeatmapHead, Scale,
    UpsampleVariant, VpPrediction,
};
use crate::nn::{Layer, ParamGroup, ParamStore};

/// Which heatmap scales receive a loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Supervision {
    Quarter,
    Half,
    Fused,
}

impl Supervision {
    pub fn quarter(self) -> bool {
        matches!(self, Self::Quarter | Self::Fused)
    }

    pub fn half(self) -> bool {
        matches!(self, Self::Half | Self::Fused)
    }
}

/// How the final point is read out of the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegressionVariant {
    /// Argmax of the quarter-scale heatmap.
    Heatmap,
    /// Argmax of the half-scale heatmap.
    MultiScale,
    /// Grid-cell coordinate regression.
    Coordinate,
}

impl RegressionVariant {
    pub const ALL: [RegressionVariant; 3] = [Self::Heatmap, Self::MultiScale, Self::Coordinate];

    pub fn key(self) -> &'static str {
        match self {
            Self::Heatmap => "heatmap",
            Self::MultiScale => "multi-scale",
            Self::Coordinate => "coordinate",
        }
    }

    /// Decodes image `index` of a batch output into input pixels.
    pub fn decode(self, out: &ModelOutput, index: usize, input_size: usize) -> Result<VpPrediction> {
        let missing = |what: &str| {
            Error::config(format!("regression variant `{}` needs the {what} output", self.key()))
        };
        match self {
            Self::Heatmap => decode_heatmap(&Heatmap::from_tensor(Scale::Quarter, &out.heatmap_q.get(index)?)?),
            Self::MultiScale => {
                let h = out.heatmap_h.as_ref().ok_or_else(|| missing("half-scale heatmap"))?;
                decode_heatmap(&Heatmap::from_tensor(Scale::Half, &h.get(index)?)?)
            }
            Self::Coordinate => {
                let g = out.grid.as_ref().ok_or_else(|| missing("grid"))?;
                let pred = GridPrediction::from_tensor(&g.get(index)?)?;
                let cell = input_size as f64 / pred.grid_w as f64;
                decode(&pred, cell)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub upsample: UpsampleVariant,
    pub supervision: Supervision,
    pub regression: RegressionVariant,
    /// Resolution of the coordinate-regression grid.
    pub grid_scale: Scale,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            upsample: UpsampleVariant::Upu,
            supervision: Supervision::Fused,
            regression: RegressionVariant::Coordinate,
            grid_scale: Scale::Half,
        }
    }
}

/// Which loss terms a model configuration trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActiveTerms {
    pub quarter: bool,
    pub half: bool,
    pub grid: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        match self.regression {
            RegressionVariant::Heatmap if !self.supervision.quarter() => Err(Error::config(
                "model.regression = \"heatmap\" decodes the quarter heatmap, which model.supervision leaves untrained",
            )),
            RegressionVariant::MultiScale if !self.supervision.half() => Err(Error::config(
                "model.regression = \"multi-scale\" decodes the half heatmap, which model.supervision leaves untrained",
            )),
            _ => Ok(()),
        }
    }

    pub fn input_size(&self) -> usize {
        self.backbone.input_size
    }

    pub fn active_terms(&self) -> ActiveTerms {
        ActiveTerms {
            quarter: self.supervision.quarter(),
            half: self.supervision.half(),
            grid: self.regression == RegressionVariant::Coordinate,
        }
    }

    fn needs_half(&self) -> bool {
        self.supervision.half()
            || self.regression == RegressionVariant::MultiScale
            || (self.regression == RegressionVariant::Coordinate && self.grid_scale == Scale::Half)
    }

    /// Cells per side of the coordinate grid.
    pub fn grid_size(&self) -> usize {
        self.input_size() / self.grid_scale.stride()
    }
}

/// Raw network outputs for a batch.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    /// `[B, 1, S/4, S/4]`
    pub heatmap_q: Tensor,
    /// `[B, 1, S/2, S/2]`, absent when nothing downstream uses it.
    pub heatmap_h: Option<Tensor>,
    /// `[B, 3, G, G]` (confidence, x, y logits), only for coordinate regression.
    pub grid: Option<Tensor>,
}

/// Anything that maps a preprocessed image batch to points in input pixels.
pub trait Detector {
    fn input_size(&self) -> usize;
    fn detect(&self, images: &Tensor) -> Result<Vec<VpPrediction>>;
}

pub struct VpNet {
    config: ModelConfig,
    store: ParamStore,
    backbone: FeatureExtractor,
    quarter: HeatmapHead,
    half: HalfBranch,
    coord: CoordHead,
}

impl VpNet {
    pub fn new(config: &ModelConfig, store: &ParamStore) -> Result<Self> {
        config.validate()?;
        let backbone = build_backbone(&config.backbone, &store.root(ParamGroup::Backbone).pp("backbone"))?;
        let rest = store.root(ParamGroup::Rest);
        let c = backbone.out_channels();
        let coord_in = match config.grid_scale {
            Scale::Quarter => c + 1,
            Scale::Half => c + 2,
        };
        Ok(Self {
            config: config.clone(),
            store: store.clone(),
            quarter: HeatmapHead::new(&rest.pp("quarter"), c)?,
            half: HalfBranch::new(&rest.pp("half"), config.upsample, c)?,
            coord: CoordHead::new(&rest.pp("coord"), coord_in, c)?,
            backbone,
        })
    }

    /// Fresh CPU model initialised from `seed`.
    pub fn seeded(config: &ModelConfig, dtype: DType, seed: u64) -> Result<Self> {
        Self::new(config, &ParamStore::new(Device::Cpu, dtype, seed))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn backbone(&self) -> &FeatureExtractor {
        &self.backbone
    }

    pub fn parameter_count(&self) -> usize {
        self.store.parameter_count("")
    }

    pub fn features(&self, images: &Tensor, train: bool) -> Result<FeatureMap> {
        self.backbone.forward_t(images, train)
    }

    pub fn forward_t(&self, images: &Tensor, train: bool) -> Result<ModelOutput> {
        let features = self.features(images, train)?;
        self.heads_forward(&features, train)
    }

    /// Head stack on top of precomputed trunk features.
    pub fn heads_forward(&self, features: &FeatureMap, train: bool) -> Result<ModelOutput> {
        let f = features.tensor();
        let heatmap_q = self.quarter.forward(f)?;
        let half = if self.config.needs_half() {
            Some(self.half.forward_t(&heatmap_q, features, train)?)
        } else {
            None
        };
        let grid = if self.config.regression == RegressionVariant::Coordinate {
            let xs = match (self.config.grid_scale, &half) {
                (Scale::Half, Some(h)) => Tensor::cat(&[&h.features, &h.heatmap], 1)?,
                (Scale::Half, None) => unreachable!("half branch runs for half-scale grids"),
                (Scale::Quarter, _) => Tensor::cat(&[f, &heatmap_q], 1)?,
            };
            Some(self.coord.forward_t(&xs, train)?)
        } else {
            None
        };
        Ok(ModelOutput {
            heatmap_q,
            heatmap_h: half.map(|h| h.heatmap),
            grid,
        })
    }
}

impl Detector for VpNet {
    fn input_size(&self) -> usize {
        self.config.input_size()
    }

    fn detect(&self, images: &Tensor) -> Result<Vec<VpPrediction>> {
        let images = images.to_dtype(self.store.dtype())?;
        let out = self.forward_t(&images, false)?;
        let n = images.dims()[0];
        (0..n)
            .map(|i| self.config.regression.decode(&out, i, self.input_size()))
            .collect()
    }
}
