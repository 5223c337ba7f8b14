//! Heatmap heads, stride-4 to stride-2 upsampling, and the grid-cell
//! coordinate regression head with its decoder.
//!
//! A decoded point is `((sigmoid(tx) + cx) * cell, (sigmoid(ty) + cy) * cell)`
//! where `(cx, cy)` is the top-left corner, in cells, of the cell with the
//! highest confidence.

mod modules;

use candle_core::{Result as TensorResult, Tensor};
use serde::{Deserialize, Serialize};

use crate::backbone::FeatureMap;
use crate::error::{Error, Result};
use crate::nn::{Layer, ParamBuilder};

pub use modules::{
    conv_down, deconv, ConvDown, CoordHead, Deconv, DownProjection, HeatmapHead, UpProjection,
    UpsampleVariant, Upsampler,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Quarter,
    Half,
}

impl Scale {
    /// Input pixels per map cell.
    pub fn stride(self) -> usize {
        match self {
            Scale::Quarter => 4,
            Scale::Half => 2,
        }
    }
}

/// Dense single-channel map, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub scale: Scale,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

impl Heatmap {
    pub fn zeros(scale: Scale, input_size: usize) -> Self {
        let n = input_size / scale.stride();
        Self {
            scale,
            height: n,
            width: n,
            values: vec![0.0; n * n],
        }
    }

    /// Reads a `[H, W]`, `[1, H, W]` or `[1, 1, H, W]` tensor.
    pub fn from_tensor(scale: Scale, t: &Tensor) -> Result<Self> {
        let dims = t.dims();
        let (h, w) = match dims {
            [h, w] | [1, h, w] | [1, 1, h, w] => (*h, *w),
            _ => return Err(Error::shape(format!("expected a single heatmap, got {dims:?}"))),
        };
        let values = t
            .flatten_all()?
            .to_dtype(candle_core::DType::F32)?
            .to_vec1::<f32>()?;
        Ok(Self {
            scale,
            height: h,
            width: w,
            values,
        })
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.width + col]
    }

    /// Row-major argmax, ties resolved to the lowest index.
    pub fn argmax(&self) -> Option<(usize, usize)> {
        let mut best: Option<(usize, f32)> = None;
        for (i, &v) in self.values.iter().enumerate() {
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((i, v));
            }
        }
        best.map(|(i, _)| (i / self.width, i % self.width))
    }
}

/// Raw per-cell outputs of the coordinate head for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPrediction {
    pub grid_h: usize,
    pub grid_w: usize,
    pub confidence: Vec<f64>,
    pub offset_x: Vec<f64>,
    pub offset_y: Vec<f64>,
}

impl GridPrediction {
    /// Reads a `[3, G, G]` or `[1, 3, G, G]` tensor (confidence, x, y).
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = match t.rank() {
            4 if t.dims()[0] == 1 => t.squeeze(0)?,
            3 => t.clone(),
            _ => return Err(Error::shape(format!("expected [1, 3, G, G], got {:?}", t.dims()))),
        };
        let (c, h, w) = t.dims3()?;
        if c != 3 {
            return Err(Error::shape(format!("grid prediction needs 3 planes, got {c}")));
        }
        let planes = t.to_dtype(candle_core::DType::F64)?.reshape((3, h * w))?.to_vec2::<f64>()?;
        let mut planes = planes.into_iter();
        Ok(Self {
            grid_h: h,
            grid_w: w,
            confidence: planes.next().unwrap_or_default(),
            offset_x: planes.next().unwrap_or_default(),
            offset_y: planes.next().unwrap_or_default(),
        })
    }

    pub fn filled(grid_h: usize, grid_w: usize, confidence: f64, offset: f64) -> Self {
        let n = grid_h * grid_w;
        Self {
            grid_h,
            grid_w,
            confidence: vec![confidence; n],
            offset_x: vec![offset; n],
            offset_y: vec![offset; n],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.grid_h * self.grid_w;
        if self.confidence.len() != n || self.offset_x.len() != n || self.offset_y.len() != n {
            return Err(Error::shape("grid planes must share grid_h x grid_w"));
        }
        Ok(())
    }
}

/// A decoded vanishing point in input pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VpPrediction {
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
    /// `(row, col)` of the responsible cell.
    pub cell: (usize, usize),
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`sigmoid`]; `0 -> -inf`, `1 -> +inf`.
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Position inside `[cell, cell + 1) * cell_size`, never reaching the far edge,
/// both in pixels and after dividing back by `cell_size`.
fn place(offset: f64, cell: usize, cell_size: f64) -> f64 {
    let (lo, hi) = (cell as f64, (cell + 1) as f64);
    let mut v = (offset + lo) * cell_size;
    // rounding in the product or the division can land a ulp outside
    while v >= hi * cell_size || v / cell_size >= hi {
        v = v.next_down();
    }
    while v < lo * cell_size || v / cell_size < lo {
        v = v.next_up();
    }
    v
}

/// Decodes the highest-confidence cell into input-pixel coordinates.
pub fn decode(pred: &GridPrediction, cell_size: f64) -> Result<VpPrediction> {
    pred.validate()?;
    if pred.confidence.is_empty() {
        return Err(Error::shape("cannot decode an empty grid"));
    }
    // sigmoid is monotone, so the argmax over logits is the argmax over probabilities
    let mut best = 0;
    for (i, &z) in pred.confidence.iter().enumerate() {
        if z > pred.confidence[best] {
            best = i;
        }
    }
    let row = best / pred.grid_w;
    let col = best % pred.grid_w;
    Ok(VpPrediction {
        x: place(sigmoid(pred.offset_x[best]), col, cell_size),
        y: place(sigmoid(pred.offset_y[best]), row, cell_size),
        confidence: sigmoid(pred.confidence[best]),
        cell: (row, col),
    })
}

/// Heatmap-argmax decode at the centre of the winning cell
/// (`stride * idx + stride / 2`).
pub fn decode_heatmap(heatmap: &Heatmap) -> Result<VpPrediction> {
    let (row, col) = heatmap
        .argmax()
        .ok_or_else(|| Error::shape("cannot decode an empty heatmap"))?;
    let stride = heatmap.scale.stride() as f64;
    Ok(VpPrediction {
        x: stride * col as f64 + stride / 2.0,
        y: stride * row as f64 + stride / 2.0,
        confidence: (heatmap.get(row, col) as f64).clamp(0.0, 1.0),
        cell: (row, col),
    })
}

/// Stride-2 branch: upsampler over `[features, quarter heatmap]`, plus a
/// 1x1 head for the half-scale heatmap.
#[derive(Debug, Clone)]
pub struct HalfBranch {
    pub upsampler: Upsampler,
    pub heatmap: HeatmapHead,
}

/// Half-scale multi-channel features and the half-scale heatmap.
#[derive(Debug, Clone)]
pub struct HalfOutput {
    pub features: Tensor,
    pub heatmap: Tensor,
}

impl HalfBranch {
    pub fn new(pb: &ParamBuilder, variant: UpsampleVariant, feature_channels: usize) -> Result<Self> {
        let channels = feature_channels + 1;
        Ok(Self {
            upsampler: Upsampler::new(&pb.pp("upsample"), variant, channels)?,
            heatmap: HeatmapHead::new(&pb.pp("heatmap"), channels)?,
        })
    }

    pub fn forward_t(&self, low: &Tensor, features: &FeatureMap, train: bool) -> Result<HalfOutput> {
        let f = features.tensor();
        let (_, _, h, w) = f.dims4()?;
        let (_, lc, lh, lw) = low.dims4()?;
        if lc != 1 || lh != h || lw != w {
            return Err(Error::shape(format!(
                "quarter heatmap {:?} does not match features {:?}",
                low.dims(),
                f.dims()
            )));
        }
        let xs = Tensor::cat(&[f, low], 1)?;
        Ok(self.forward_concat(&xs, train)?)
    }

    fn forward_concat(&self, xs: &Tensor, train: bool) -> TensorResult<HalfOutput> {
        let features = self.upsampler.forward_t(xs, train)?;
        let heatmap = candle_core::Module::forward(&self.heatmap, &features)?;
        Ok(HalfOutput { features, heatmap })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ParamGroup, ParamStore};
    use candle_core::{DType, Device, Module};
    use proptest::prelude::*;

    #[test]
    fn decode_centre_of_cell() {
        let mut g = GridPrediction::filled(40, 40, -5.0, 0.0);
        g.confidence[20 * 40 + 10] = 3.0;
        let vp = decode(&g, 2.0).unwrap();
        assert_eq!((vp.x, vp.y), (21.0, 41.0));
        assert_eq!(vp.cell, (20, 10));
        assert!((vp.confidence - sigmoid(3.0)).abs() < 1e-15);
    }

    #[test]
    fn decode_saturated_offsets_stay_inside_cell() {
        let mut g = GridPrediction::filled(4, 4, 0.0, 1e6);
        g.confidence[5] = 1.0;
        let vp = decode(&g, 2.0).unwrap();
        assert!(vp.x < 4.0 && vp.x > 3.999);
        assert!(vp.y < 4.0 && vp.y > 3.999);
    }

    #[test]
    fn decode_tie_breaks_to_first_cell() {
        let g = GridPrediction::filled(8, 8, 0.7, 0.0);
        assert_eq!(decode(&g, 2.0).unwrap().cell, (0, 0));
    }

    #[test]
    fn decode_rejects_empty() {
        let g = GridPrediction::filled(0, 0, 0.0, 0.0);
        assert!(decode(&g, 2.0).is_err());
        let mut g = GridPrediction::filled(2, 2, 0.0, 0.0);
        g.offset_x.pop();
        assert!(decode(&g, 2.0).is_err());
    }

    #[test]
    fn heatmap_decode_uses_cell_centres() {
        let mut h = Heatmap::zeros(Scale::Half, 320);
        let i = 40 * h.width + 80;
        h.values[i] = 0.9;
        let vp = decode_heatmap(&h).unwrap();
        assert_eq!((vp.x, vp.y), (161.0, 81.0));

        let mut q = Heatmap::zeros(Scale::Quarter, 320);
        q.values[7 * q.width + 3] = 0.5;
        let vp = decode_heatmap(&q).unwrap();
        assert_eq!((vp.x, vp.y), (4.0 * 3.0 + 2.0, 4.0 * 7.0 + 2.0));
    }

    #[test]
    fn grid_prediction_from_tensor() {
        let t = Tensor::arange(0f32, 12., &Device::Cpu).unwrap().reshape((1, 3, 2, 2)).unwrap();
        let g = GridPrediction::from_tensor(&t).unwrap();
        assert_eq!(g.confidence, vec![0.0, 1.0, 2.0, 3.0]);
        assert_eq!(g.offset_y, vec![8.0, 9.0, 10.0, 11.0]);
        assert!(GridPrediction::from_tensor(&t.narrow(1, 0, 2).unwrap()).is_err());
    }

    fn tiny_features(c: usize, n: usize) -> FeatureMap {
        FeatureMap(Tensor::randn(0f32, 1., (2, c, n, n), &Device::Cpu).unwrap())
    }

    #[test]
    fn two_x_law_for_every_variant() {
        for variant in UpsampleVariant::ALL {
            for n in [10, 20] {
                let store = ParamStore::cpu(DType::F32, 1);
                let branch = HalfBranch::new(&store.root(ParamGroup::Rest), variant, 3).unwrap();
                let f = tiny_features(3, n);
                let low = Tensor::randn(0f32, 1., (2, 1, n, n), &Device::Cpu).unwrap();
                let out = branch.forward_t(&low, &f, true).unwrap();
                assert_eq!(out.heatmap.dims(), &[2, 1, 2 * n, 2 * n], "{variant:?}");
                assert_eq!(out.features.dims(), &[2, 4, 2 * n, 2 * n]);
            }
        }
    }

    #[test]
    fn upsample_rejects_mismatched_sizes() {
        let store = ParamStore::cpu(DType::F32, 1);
        let branch = HalfBranch::new(&store.root(ParamGroup::Rest), UpsampleVariant::Upu, 3).unwrap();
        let f = tiny_features(3, 8);
        let low = Tensor::zeros((2, 1, 6, 6), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(branch.forward_t(&low, &f, false), Err(Error::Shape(_))));
    }

    #[test]
    fn upu_matches_hand_composition() {
        let store = ParamStore::cpu(DType::F64, 2);
        let upu = UpProjection::new(&store.root(ParamGroup::Rest), 5, 5).unwrap();
        let x = Tensor::randn(0f64, 1., (2, 5, 6, 6), &Device::Cpu).unwrap();
        let out = upu.forward_t(&x, false).unwrap();

        // Deconv = transposed conv + BN + ReLU, Conv = strided conv + BN + ReLU.
        let bn = |t: &Tensor, layer: &crate::nn::BatchNorm2d| layer.forward_t(t, false).unwrap();
        let d1 = &upu.up1;
        let h0 = bn(&d1.conv.forward(&x).unwrap(), &d1.bn).relu().unwrap();
        let l0 = bn(&upu.down.conv.forward(&h0).unwrap(), &upu.down.bn).relu().unwrap();
        let e = (l0 - &x).unwrap();
        let d2 = &upu.up2;
        let h1 = bn(&d2.conv.forward(&e).unwrap(), &d2.bn).relu().unwrap();
        let expected = (h0 + h1).unwrap();

        let a = out.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let b = expected.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn upu_projects_when_channels_differ() {
        let store = ParamStore::cpu(DType::F32, 2);
        let upu = UpProjection::new(&store.root(ParamGroup::Rest), 5, 3).unwrap();
        assert!(upu.project.is_some());
        let x = Tensor::randn(0f32, 1., (1, 5, 4, 4), &Device::Cpu).unwrap();
        assert_eq!(upu.forward_t(&x, true).unwrap().dims(), &[1, 3, 8, 8]);
    }

    #[test]
    fn zero_coord_head_gives_zero_logits() {
        let store = ParamStore::cpu(DType::F32, 3);
        let head = CoordHead::new(&store.root(ParamGroup::Rest).pp("coord"), 4, 4).unwrap();
        for (_, p) in store.params() {
            p.var.set(&p.var.zeros_like().unwrap()).unwrap();
        }
        let x = Tensor::randn(0f32, 1., (1, 4, 16, 16), &Device::Cpu).unwrap();
        let y = head.forward_t(&x, false).unwrap();
        assert_eq!(y.dims(), &[1, 3, 16, 16]);
        let g = GridPrediction::from_tensor(&y).unwrap();
        assert!(g.confidence.iter().all(|&z| z == 0.0));
    }

    proptest! {
        #[test]
        fn decoded_point_inside_cell(
            conf in proptest::collection::vec(-30.0f64..30.0, 16),
            ox in proptest::collection::vec(-60.0f64..60.0, 16),
            oy in proptest::collection::vec(-60.0f64..60.0, 16),
            cell in 1.0f64..8.0,
        ) {
            let g = GridPrediction { grid_h: 4, grid_w: 4, confidence: conf, offset_x: ox, offset_y: oy };
            let vp = decode(&g, cell).unwrap();
            let (r, c) = vp.cell;
            prop_assert!(c as f64 <= vp.x / cell && vp.x / cell < c as f64 + 1.0);
            prop_assert!(r as f64 <= vp.y / cell && vp.y / cell < r as f64 + 1.0);
            prop_assert!(vp.x >= 0.0 && vp.x < 4.0 * cell);
        }

        #[test]
        fn decode_monotone_in_offset(base in -20.0f64..20.0, delta in 0.0f64..10.0) {
            let mut g = GridPrediction::filled(3, 3, 0.0, 0.0);
            g.confidence[4] = 1.0;
            g.offset_x[4] = base;
            let a = decode(&g, 2.0).unwrap().x;
            g.offset_x[4] = base + delta;
            let b = decode(&g, 2.0).unwrap().x;
            prop_assert!(b >= a);
        }

        #[test]
        fn argmax_invariant_to_shift(
            conf in proptest::collection::vec(-10.0f64..10.0, 9),
            shift in -100.0f64..100.0,
        ) {
            let g = GridPrediction { grid_h: 3, grid_w: 3, confidence: conf.clone(), offset_x: vec![0.0; 9], offset_y: vec![0.0; 9] };
            let shifted = GridPrediction { confidence: conf.iter().map(|z| z + shift).collect(), ..g.clone() };
            // skip near-ties where rounding can legitimately reorder
            let mut sorted = conf.clone();
            sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
            prop_assume!(sorted[0] - sorted[1] > 1e-9);
            prop_assert_eq!(decode(&g, 2.0).unwrap().cell, decode(&shifted, 2.0).unwrap().cell);
        }
    }
}
