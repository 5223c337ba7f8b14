use candle_core::{Device, Tensor};
use rayon::prelude::*;

use crate::data::{augment, image_to_tensor, make_target, resize_with_annotation, ImageSample, TrainTarget};
use crate::error::{Error, Result};
use crate::heads::Scale;
use crate::loss::BatchTargets;

/// One collated mini-batch.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `[B, 3, S, S]`
    pub images: Tensor,
    pub targets: BatchTargets,
    pub ids: Vec<String>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Resizes every sample to the network input, in parallel, keeping order.
pub fn resize_all(samples: &[ImageSample], input_size: usize) -> Result<Vec<ImageSample>> {
    samples
        .par_iter()
        .map(|s| resize_with_annotation(s, input_size as u32))
        .collect()
}

/// Stacks already-resized samples into tensors and targets. `augment_seeds`
/// gives a per-sample augmentation seed, or `None` for the samples as-is.
pub fn collate(
    samples: &[&ImageSample],
    augment_seeds: Option<&[u64]>,
    input_size: usize,
    sigma: f64,
    grid_scale: Scale,
    device: &Device,
) -> Result<Batch> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let prepared: Vec<(Tensor, TrainTarget, String)> = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let s = match augment_seeds {
                Some(seeds) => augment(s, seeds[i]),
                None => (*s).clone(),
            };
            let target = make_target(s.vp, input_size, sigma, grid_scale)?;
            Ok((image_to_tensor(&s.image, device)?, target, s.id))
        })
        .collect::<Result<_>>()?;

    let b = prepared.len();
    let images: Vec<&Tensor> = prepared.iter().map(|p| &p.0).collect();
    let images = Tensor::stack(&images, 0)?;
    let map = |f: fn(&TrainTarget) -> &crate::heads::Heatmap| -> Result<Tensor> {
        let first = f(&prepared[0].1);
        let (h, w) = (first.height, first.width);
        let values: Vec<f32> = prepared.iter().flat_map(|p| f(&p.1).values.iter().copied()).collect();
        Ok(Tensor::from_vec(values, (b, 1, h, w), device)?)
    };
    let heatmap_q = map(|t| &t.heatmap_q)?;
    let heatmap_h = map(|t| &t.heatmap_h)?;
    let cells: Vec<_> = prepared.iter().map(|p| p.1.grid.cell).collect();
    let offsets: Vec<_> = prepared.iter().map(|p| p.1.grid.offsets).collect();
    let grid = input_size / grid_scale.stride();
    let (positive, offsets) = BatchTargets::grid_tensors(&cells, &offsets, grid, device)?;
    Ok(Batch {
        images,
        targets: BatchTargets {
            heatmap_q,
            heatmap_h,
            positive,
            offsets,
        },
        ids: prepared.into_iter().map(|p| p.2).collect(),
    })
}
