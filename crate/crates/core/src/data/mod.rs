//! Samples, annotation files, geometric transforms, training targets and a
//! synthetic road-scene generator.

mod annotation;
mod synth;
mod targets;
mod transform;

use candle_core::{Device, Tensor};
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use annotation::{load_dataset, read_annotations, save_dataset, write_annotations, AnnotationRecord};
pub use synth::{synth_dataset, SynthConfig, SynthSample};
pub use targets::{gaussian_target, grid_target, make_target, GridTarget, TrainTarget, DEFAULT_SIGMA};
pub use transform::{
    augment, augment_with, resize_with_annotation, to_original, AugmentParams, MAX_ROTATION_DEG,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// An image with its annotated vanishing point in pixel coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub id: String,
    pub image: RgbImage,
    pub vp: Point,
}

impl ImageSample {
    pub fn new(id: impl Into<String>, image: RgbImage, vp: Point) -> Result<Self> {
        let s = Self {
            id: id.into(),
            image,
            vp,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn width(&self) -> u32 {
        self.image.width()
    }

    pub fn height(&self) -> u32 {
        self.image.height()
    }

    pub fn validate(&self) -> Result<()> {
        let (w, h) = self.image.dimensions();
        if w == 0 || h == 0 {
            return Err(Error::data(format!("{}: empty image", self.id)));
        }
        let Point { x, y } = self.vp;
        if !(x >= 0.0 && x < w as f64 && y >= 0.0 && y < h as f64) {
            return Err(Error::data(format!(
                "{}: vanishing point ({x}, {y}) outside {w}x{h} image",
                self.id
            )));
        }
        Ok(())
    }
}

const MEAN: [f32; 3] = [0.485, 0.456, 0.406];
const STD: [f32; 3] = [0.229, 0.224, 0.225];

/// `[3, H, W]` float tensor, per-channel standardized.
pub fn image_to_tensor(image: &RgbImage, device: &Device) -> Result<Tensor> {
    let (w, h) = image.dimensions();
    let plane = (w * h) as usize;
    let mut data = vec![0f32; 3 * plane];
    for (i, px) in image.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = (px.0[c] as f32 / 255.0 - MEAN[c]) / STD[c];
        }
    }
    Ok(Tensor::from_vec(data, (3, h as usize, w as usize), device)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_validation() {
        let img = RgbImage::new(10, 8);
        assert!(ImageSample::new("a", img.clone(), Point::new(9.5, 7.9)).is_ok());
        assert!(ImageSample::new("a", img.clone(), Point::new(10.0, 1.0)).is_err());
        assert!(ImageSample::new("a", img.clone(), Point::new(-0.1, 1.0)).is_err());
        assert!(ImageSample::new("a", img, Point::new(f64::NAN, 1.0)).is_err());
        assert!(ImageSample::new("a", RgbImage::new(0, 0), Point::new(0.0, 0.0)).is_err());
    }

    #[test]
    fn tensor_layout() {
        let mut img = RgbImage::new(2, 1);
        img.put_pixel(1, 0, image::Rgb([255, 0, 0]));
        let t = image_to_tensor(&img, &Device::Cpu).unwrap();
        assert_eq!(t.dims(), &[3, 1, 2]);
        let v = t.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!((v[1] - (1.0 - MEAN[0]) / STD[0]).abs() < 1e-6);
        assert!((v[0] + MEAN[0] / STD[0]).abs() < 1e-6);
    }
}
