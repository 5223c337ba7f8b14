//! Declarative ablation sweeps: one axis, a fixed budget, one trained and
//! evaluated model per variant.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle_core::Device;
use serde::{Deserialize, Serialize};

use crate::backbone::BackboneKind;
use crate::data::ImageSample;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalReport, HISTOGRAM_BINS};
use crate::heads::{Scale, UpsampleVariant};
use crate::loss::LossConfig;
use crate::model::{ModelConfig, RegressionVariant, Supervision, VpNet};
use crate::training::{write_loss_csv, TrainConfig, Trainer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationAxis {
    Backbone,
    Supervision,
    Upsample,
    Regression,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 4] = [Self::Backbone, Self::Supervision, Self::Upsample, Self::Regression];

    pub fn key(self) -> &'static str {
        match self {
            Self::Backbone => "backbone",
            Self::Supervision => "supervision",
            Self::Upsample => "upsample",
            Self::Regression => "regression",
        }
    }

    /// Axis-specific table columns, after `variant,label`.
    fn columns(self) -> &'static [&'static str] {
        match self {
            Self::Backbone => &["parameters"],
            Self::Supervision => &["quarter_supervision", "half_supervision", "grid_scale"],
            Self::Upsample => &["deconv_block", "upu", "upu2"],
            Self::Regression => &["heatmap_regression", "multi_scale_regression", "coordinate_regression"],
        }
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.key() == s)
            .ok_or_else(|| Error::config(format!("unknown ablation axis {s:?} (expected backbone, supervision, upsample or regression)")))
    }
}

/// One configuration in a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationVariant {
    pub key: String,
    pub label: String,
    pub model: ModelConfig,
}

/// Training and evaluation budget shared by every variant of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationBudget {
    pub epochs: usize,
    pub train_samples: usize,
    pub eval_samples: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub axis: AblationAxis,
    pub variants: Vec<AblationVariant>,
}

fn flag(b: bool) -> String {
    if b { "yes" } else { "no" }.to_string()
}

impl AblationSpec {
    /// The standard variant rows for `axis`, each overriding `base` on that axis only.
    pub fn for_axis(axis: AblationAxis, base: &ModelConfig) -> Self {
        let variant = |key: &str, label: &str, model: ModelConfig| AblationVariant {
            key: key.to_string(),
            label: label.to_string(),
            model,
        };
        let variants = match axis {
            AblationAxis::Backbone => BackboneKind::ALL
                .into_iter()
                .map(|k| {
                    let model = ModelConfig {
                        backbone: base.backbone.with_kind(k),
                        ..base.clone()
                    };
                    variant(k.key(), k.label(), model)
                })
                .collect(),
            AblationAxis::Supervision => [
                ("quarter", "1/4 only", Supervision::Quarter, Scale::Quarter),
                ("half", "1/2 only", Supervision::Half, Scale::Half),
                ("fused-quarter", "1/4 + 1/2, regression at 1/4", Supervision::Fused, Scale::Quarter),
                ("fused-half", "1/4 + 1/2, regression at 1/2", Supervision::Fused, Scale::Half),
            ]
            .into_iter()
            .map(|(key, label, supervision, grid_scale)| {
                let model = ModelConfig {
                    supervision,
                    grid_scale,
                    regression: RegressionVariant::Coordinate,
                    ..base.clone()
                };
                variant(key, label, model)
            })
            .collect(),
            AblationAxis::Upsample => UpsampleVariant::ALL
                .into_iter()
                .map(|u| variant(u.key(), u.label(), ModelConfig { upsample: u, ..base.clone() }))
                .collect(),
            AblationAxis::Regression => [
                ("heatmap", "a: heatmap", Supervision::Quarter, RegressionVariant::Heatmap),
                ("multi-scale", "b: + multi-scale", Supervision::Fused, RegressionVariant::MultiScale),
                ("coordinate", "c: + coordinate", Supervision::Fused, RegressionVariant::Coordinate),
            ]
            .into_iter()
            .map(|(key, label, supervision, regression)| {
                let model = ModelConfig {
                    supervision,
                    regression,
                    grid_scale: Scale::Half,
                    ..base.clone()
                };
                variant(key, label, model)
            })
            .collect(),
        };
        Self { axis, variants }
    }

    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() {
            return Err(Error::config("ablation has no variants"));
        }
        for v in &self.variants {
            v.model
                .validate()
                .map_err(|e| Error::config(format!("ablation variant `{}`: {e}", v.key)))?;
        }
        Ok(())
    }

    fn axis_cells(&self, v: &AblationVariant, parameters: usize) -> Vec<String> {
        let m = &v.model;
        match self.axis {
            AblationAxis::Backbone => vec![parameters.to_string()],
            AblationAxis::Supervision => vec![
                flag(m.supervision.quarter()),
                flag(m.supervision.half()),
                match m.grid_scale {
                    Scale::Quarter => "1/4".to_string(),
                    Scale::Half => "1/2".to_string(),
                },
            ],
            AblationAxis::Upsample => UpsampleVariant::ALL.iter().map(|&u| flag(m.upsample == u)).collect(),
            AblationAxis::Regression => vec![
                flag(true),
                flag(m.regression != RegressionVariant::Heatmap),
                flag(m.regression == RegressionVariant::Coordinate),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub label: String,
    pub columns: Vec<String>,
    pub parameters: usize,
    pub final_loss: f64,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub axis: AblationAxis,
    pub budget: AblationBudget,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut header = vec!["variant".to_string(), "label".to_string()];
        header.extend(self.axis.columns().iter().map(|c| c.to_string()));
        header.extend(
            ["n", "mean_error", "count_below_001", "count_failed", "cpu_fps", "final_loss"]
                .iter()
                .map(|c| c.to_string()),
        );
        header.extend((0..HISTOGRAM_BINS).map(|k| format!("bin_{k}")));
        header.extend(["budget_epochs", "budget_train_samples", "budget_eval_samples", "seed"].map(String::from));
        let mut out = header.join(",");
        out.push('\n');
        for r in &self.rows {
            let mut cells = vec![r.variant.clone(), format!("\"{}\"", r.label)];
            cells.extend(r.columns.iter().cloned());
            let rep = &r.report;
            cells.extend([
                rep.n.to_string(),
                rep.mean_error.to_string(),
                rep.count_below_001.to_string(),
                rep.count_failed.to_string(),
                format!("{:.3}", rep.fps),
                r.final_loss.to_string(),
            ]);
            cells.extend(rep.histogram.iter().map(|c| c.to_string()));
            cells.extend([
                self.budget.epochs.to_string(),
                self.budget.train_samples.to_string(),
                self.budget.eval_samples.to_string(),
                self.budget.seed.to_string(),
            ]);
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    /// Writes `table.csv` and `table.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let csv = dir.join("table.csv");
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let json = dir.join("table.json");
        let text = serde_json::to_string_pretty(self).expect("table serialises");
        std::fs::write(&json, text).map_err(|e| Error::io(&json, e))
    }
}

/// Trains and evaluates every variant with the same seed, data and
/// budget, writing results under `out_root/ablate-<axis>-<timestamp>`.
/// All variants are validated before any training starts.
pub fn run_ablation(
    spec: &AblationSpec,
    train: &[ImageSample],
    eval: &[ImageSample],
    train_config: &TrainConfig,
    loss: &LossConfig,
    out_root: &Path,
) -> Result<(AblationTable, PathBuf)> {
    spec.validate()?;
    train_config.validate()?;
    loss.validate()?;
    if train.is_empty() || eval.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    let dir = out_root.join(format!("ablate-{}-{stamp}", spec.axis.key()));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;

    let budget = AblationBudget {
        epochs: train_config.epochs,
        train_samples: train.len(),
        eval_samples: eval.len(),
        seed: train_config.seed,
    };
    let mut rows = Vec::with_capacity(spec.variants.len());
    for v in &spec.variants {
        log::info!("ablation {} / {}: training {} epochs", spec.axis.key(), v.key, budget.epochs);
        let net = VpNet::seeded(&v.model, candle_core::DType::F32, train_config.seed)?;
        let parameters = net.parameter_count();
        let mut trainer = Trainer::new(net, train_config.clone(), *loss)?;
        trainer.fit(train)?;
        write_loss_csv(&dir.join(format!("loss-{}.csv", v.key)), trainer.history())?;
        let report = evaluate(trainer.model(), eval, &Device::Cpu)?;
        rows.push(AblationRow {
            variant: v.key.clone(),
            label: v.label.clone(),
            columns: spec.axis_cells(v, parameters),
            parameters,
            final_loss: trainer.history().last().map_or(f64::NAN, |h| h.total),
            report,
        });
    }
    let table = AblationTable {
        axis: spec.axis,
        budget,
        rows,
    };
    table.write(&dir)?;
    Ok((table, dir))
}
