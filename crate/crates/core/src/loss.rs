//! Detector objective: weighted sum of the coordinate, confidence and the
//! two heatmap losses.
//!
//! `total = lambda_coord * l_coord + l_conf + lambda_h * (l_h1 + l_h2)`,
//! where `l_conf` already carries the per-cell positive/negative weights.

use candle_core::{Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ActiveTerms, ModelOutput};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_coord: f64,
    pub lambda_h: f64,
    pub lambda_conf_pos: f64,
    pub lambda_conf_neg: f64,
    pub conf_reduction: ConfReduction,
}

/// How per-cell confidence terms are reduced to a scalar.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConfReduction {
    /// Positive and negative cells are averaged separately, then weighted.
    /// The single positive cell keeps the same pull as all negatives
    /// together, whatever the grid size.
    #[default]
    Balanced,
    /// Weighted terms averaged over every cell. On a `G x G` grid the
    /// positive cell's share shrinks as `1 / G^2`.
    Mean,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_coord: 2.0,
            lambda_h: 1.0,
            lambda_conf_pos: 1.0,
            lambda_conf_neg: 0.5,
            conf_reduction: ConfReduction::Balanced,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("lambda_coord", self.lambda_coord),
            ("lambda_h", self.lambda_h),
            ("lambda_conf_pos", self.lambda_conf_pos),
            ("lambda_conf_neg", self.lambda_conf_neg),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("loss.{key} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Scalar values of each term, kept for logging.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_coord: f64,
    pub l_conf: f64,
    pub l_h1: f64,
    pub l_h2: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Weighted sum of already-reduced components. Non-finite inputs are
    /// rejected with the offending component named.
    pub fn assemble(l_coord: f64, l_conf: f64, l_h1: f64, l_h2: f64, config: &LossConfig) -> Result<Self> {
        for (component, value) in [("l_coord", l_coord), ("l_conf", l_conf), ("l_h1", l_h1), ("l_h2", l_h2)] {
            if !value.is_finite() {
                return Err(Error::NonFinite { component, value });
            }
        }
        Ok(Self {
            l_coord,
            l_conf,
            l_h1,
            l_h2,
            total: config.lambda_coord * l_coord + l_conf + config.lambda_h * (l_h1 + l_h2),
        })
    }
}

fn check_same_shape(what: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("{what}: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Mean squared error over every element.
pub fn heatmap_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    check_same_shape("heatmap loss", pred, target)?;
    Ok((pred - target)?.sqr()?.mean_all()?)
}

fn softplus(x: &Tensor) -> candle_core::Result<Tensor> {
    // log(1 + e^x) = max(x, 0) + log(1 + e^-|x|)
    x.relu()? + (x.abs()?.neg()?.exp()? + 1.0)?.log()?
}

pub fn sigmoid(x: &Tensor) -> candle_core::Result<Tensor> {
    (x.neg()?.exp()? + 1.0)?.recip()
}

/// Weighted binary cross-entropy of `sigmoid(logits)` against the one-hot
/// `positive` mask, reduced per `config.conf_reduction`.
pub fn confidence_loss(logits: &Tensor, positive: &Tensor, config: &LossConfig) -> Result<Tensor> {
    check_same_shape("confidence loss", logits, positive)?;
    // -log(sigmoid(z)) = softplus(-z) for positives, -log(1 - sigmoid(z)) = softplus(z) otherwise
    let sign = (positive * -2.0)? + 1.0;
    let bce = softplus(&(logits * sign?)?)?;
    match config.conf_reduction {
        ConfReduction::Mean => {
            let weight = ((positive * (config.lambda_conf_pos - config.lambda_conf_neg))? + config.lambda_conf_neg)?;
            Ok((bce * weight)?.mean_all()?)
        }
        ConfReduction::Balanced => {
            let n_pos = positive.to_dtype(candle_core::DType::F64)?.sum_all()?.to_scalar::<f64>()?;
            let n_neg = positive.elem_count() as f64 - n_pos;
            let negative = (positive.ones_like()? - positive)?;
            let mut terms = Vec::new();
            if n_pos > 0.0 {
                terms.push(((&bce * positive)?.sum_all()? * (config.lambda_conf_pos / n_pos))?);
            }
            if n_neg > 0.0 {
                terms.push(((&bce * negative)?.sum_all()? * (config.lambda_conf_neg / n_neg))?);
            }
            Ok(match terms.len() {
                2 => (&terms[0] + &terms[1])?,
                _ => terms.pop().unwrap_or(bce.sum_all()?.zeros_like()?),
            })
        }
    }
}

/// Squared error between the sigmoid offsets at the ground-truth cell and
/// the true fractional offsets, averaged over the batch.
///
/// `offset_logits` is `[B, 2, G, G]`, `positive` `[B, 1, G, G]` one-hot,
/// `target` `[B, 2]`.
pub fn coordinate_loss(offset_logits: &Tensor, positive: &Tensor, target: &Tensor) -> Result<Tensor> {
    let (b, two, gh, gw) = offset_logits.dims4()?;
    if two != 2 || positive.dims() != [b, 1, gh, gw] || target.dims() != [b, 2] {
        return Err(Error::shape(format!(
            "coordinate loss: offsets {:?}, mask {:?}, target {:?}",
            offset_logits.dims(),
            positive.dims(),
            target.dims()
        )));
    }
    let picked = sigmoid(offset_logits)?
        .broadcast_mul(positive)?
        .flatten_from(2)?
        .sum(D::Minus1)?;
    Ok((picked - target)?.sqr()?.sum(1)?.mean_all()?)
}

/// Per-batch training targets at the model's resolutions.
#[derive(Debug, Clone)]
pub struct BatchTargets {
    /// `[B, 1, S/4, S/4]`
    pub heatmap_q: Tensor,
    /// `[B, 1, S/2, S/2]`
    pub heatmap_h: Tensor,
    /// `[B, 1, G, G]` one-hot at the ground-truth cell.
    pub positive: Tensor,
    /// `[B, 2]` fractional (x, y) offsets inside that cell.
    pub offsets: Tensor,
}

impl BatchTargets {
    /// Builds one-hot cell masks from `(row, col)` cells on a `grid x grid` map.
    pub fn grid_tensors(
        cells: &[(usize, usize)],
        offsets: &[(f64, f64)],
        grid: usize,
        device: &Device,
    ) -> Result<(Tensor, Tensor)> {
        let b = cells.len();
        let mut mask = vec![0f32; b * grid * grid];
        for (i, &(r, c)) in cells.iter().enumerate() {
            if r >= grid || c >= grid {
                return Err(Error::shape(format!("cell ({r}, {c}) outside {grid}x{grid} grid")));
            }
            mask[i * grid * grid + r * grid + c] = 1.0;
        }
        let offs: Vec<f32> = offsets.iter().flat_map(|&(x, y)| [x as f32, y as f32]).collect();
        Ok((
            Tensor::from_vec(mask, (b, 1, grid, grid), device)?,
            Tensor::from_vec(offs, (b, 2), device)?,
        ))
    }
}

/// Differentiable total plus its scalar breakdown. Terms switched off in
/// `active` contribute zero.
pub fn total_loss(
    out: &ModelOutput,
    targets: &BatchTargets,
    active: ActiveTerms,
    config: &LossConfig,
) -> Result<(Tensor, LossBreakdown)> {
    let dtype = out.heatmap_q.dtype();
    let mut total: Option<Tensor> = None;
    let mut add = |t: Tensor, w: f64| -> Result<()> {
        let t = (t * w)?;
        total = Some(match total.take() {
            Some(acc) => (acc + t)?,
            None => t,
        });
        Ok(())
    };
    let scalar = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?) };

    let (mut l_coord, mut l_conf, mut l_h1, mut l_h2) = (0.0, 0.0, 0.0, 0.0);
    if active.quarter {
        let l = heatmap_loss(&out.heatmap_q, &targets.heatmap_q.to_dtype(dtype)?)?;
        l_h1 = scalar(&l)?;
        add(l, config.lambda_h)?;
    }
    if active.half {
        let pred = out
            .heatmap_h
            .as_ref()
            .ok_or_else(|| Error::shape("half-scale supervision without a half-scale heatmap"))?;
        let l = heatmap_loss(pred, &targets.heatmap_h.to_dtype(dtype)?)?;
        l_h2 = scalar(&l)?;
        add(l, config.lambda_h)?;
    }
    if active.grid {
        let grid = out
            .grid
            .as_ref()
            .ok_or_else(|| Error::shape("coordinate loss without a grid output"))?;
        let positive = targets.positive.to_dtype(dtype)?;
        let conf = confidence_loss(&grid.narrow(1, 0, 1)?, &positive, config)?;
        let coord = coordinate_loss(&grid.narrow(1, 1, 2)?, &positive, &targets.offsets.to_dtype(dtype)?)?;
        l_conf = scalar(&conf)?;
        l_coord = scalar(&coord)?;
        add(conf, 1.0)?;
        add(coord, config.lambda_coord)?;
    }
    let breakdown = LossBreakdown::assemble(l_coord, l_conf, l_h1, l_h2, config)?;
    let total = match total {
        Some(t) => t,
        None => return Err(Error::config("no loss term is active")),
    };
    Ok((total, breakdown))
}
