//! Road vanishing-point detection by multi-scale heatmap regression with
//! grid-cell coordinate decoding.

pub use candle_core;

pub mod ablate;
pub mod backbone;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod heads;
pub mod loss;
pub mod model;
pub mod nn;
pub mod training;

pub use backbone::{build_backbone, BackboneConfig, BackboneKind, FeatureExtractor, FeatureMap};
pub use config::RunConfig;
pub use data::{ImageSample, Point};
pub use error::{Error, Result};
pub use evaluation::{evaluate, norm_dist, EvalReport, EvaluationRecord};
pub use heads::{decode, decode_heatmap, GridPrediction, Heatmap, Scale, UpsampleVariant, VpPrediction};
pub use loss::{ConfReduction, LossBreakdown, LossConfig};
pub use model::{Detector, ModelConfig, ModelOutput, RegressionVariant, Supervision, VpNet};
pub use training::{fit, lr_at, TrainConfig, Trainer};
