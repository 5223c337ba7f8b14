use image::imageops::{self, FilterType};
use image::Rgb;
use imageproc::geometric_transformations::{rotate, Interpolation};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ImageSample, Point};
use crate::error::{Error, Result};

/// Rotation augmentation range, degrees either side of zero.
pub const MAX_ROTATION_DEG: f64 = 10.0;

/// Largest representable coordinate strictly below `extent`.
fn clamp_inside(v: f64, extent: u32) -> f64 {
    v.clamp(0.0, (extent as f64).next_down())
}

/// Stretches the image to `size x size` and scales the annotation per axis.
pub fn resize_with_annotation(sample: &ImageSample, size: u32) -> Result<ImageSample> {
    let (w, h) = sample.image.dimensions();
    if w == 0 || h == 0 || size == 0 {
        return Err(Error::data(format!("{}: cannot resize a zero-sized image", sample.id)));
    }
    let image = if (w, h) == (size, size) {
        sample.image.clone()
    } else {
        imageops::resize(&sample.image, size, size, FilterType::Triangle)
    };
    let vp = Point::new(
        clamp_inside(sample.vp.x * size as f64 / w as f64, size),
        clamp_inside(sample.vp.y * size as f64 / h as f64, size),
    );
    Ok(ImageSample {
        id: sample.id.clone(),
        image,
        vp,
    })
}

/// Maps a point at `size x size` input resolution back to a `w x h` image.
pub fn to_original(p: Point, size: u32, w: u32, h: u32) -> Point {
    Point::new(p.x * w as f64 / size as f64, p.y * h as f64 / size as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub flip: bool,
    /// Clockwise rotation about the image centre, in degrees.
    pub angle_deg: f64,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        flip: false,
        angle_deg: 0.0,
    };

    pub fn sample(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            flip: rng.random_bool(0.5),
            angle_deg: rng.random_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG),
        }
    }
}

/// Random horizontal flip (p = 0.5) and rotation, deterministic in `seed`.
pub fn augment(sample: &ImageSample, seed: u64) -> ImageSample {
    augment_with(sample, AugmentParams::sample(seed))
}

pub fn augment_with(sample: &ImageSample, params: AugmentParams) -> ImageSample {
    let (w, h) = sample.image.dimensions();
    let mut image = sample.image.clone();
    let mut vp = sample.vp;
    if params.flip {
        image = imageops::flip_horizontal(&image);
        vp.x = w as f64 - 1.0 - vp.x;
    }
    if params.angle_deg != 0.0 {
        let theta = params.angle_deg.to_radians();
        let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
        image = rotate(
            &image,
            (cx as f32, cy as f32),
            theta as f32,
            Interpolation::Bilinear,
            Rgb([0, 0, 0]),
        );
        let (s, c) = theta.sin_cos();
        let (dx, dy) = (vp.x - cx, vp.y - cy);
        vp = Point::new(cx + c * dx - s * dy, cy + s * dx + c * dy);
    }
    vp = Point::new(clamp_inside(vp.x, w), clamp_inside(vp.y, h));
    ImageSample {
        id: sample.id.clone(),
        image,
        vp,
    }
}
