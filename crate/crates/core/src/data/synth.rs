use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ImageSample, Point};
use crate::error::{Error, Result};

/// Image size of generated road scenes. Non-square by default so the
/// stretch in `resize_with_annotation` is exercised.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub width: u32,
    pub height: u32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { width: 160, height: 120 }
    }
}

/// A generated sample together with the two rendered road edges, each as
/// `(bottom endpoint, far endpoint)`. Both edges run towards `sample.vp`.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub sample: ImageSample,
    pub edges: [(Point, Point); 2],
}

/// Distance from `p` to the segment `a`-`b`.
fn segment_dist(p: Point, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.x - a.x) * dx + (p.y - a.y) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    p.dist(Point::new(a.x + t * dx, a.y + t * dy))
}

/// Signed side of `p` relative to the directed line `a -> b`.
fn side(p: Point, a: Point, b: Point) -> f64 {
    (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x)
}

fn render(index: usize, seed: u64, cfg: SynthConfig) -> SynthSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let (w, h) = (cfg.width as f64, cfg.height as f64);

    let vp = Point::new(rng.random_range(0.2 * w..0.8 * w), rng.random_range(0.25 * h..0.6 * h));
    let bottom = h - 1.0;
    let left = Point::new(rng.random_range(-0.4 * w..0.35 * w), bottom);
    let right = Point::new(rng.random_range(0.65 * w..1.4 * w), bottom);
    // the rendered edges stop short of the vanishing point
    let stop = rng.random_range(0.05..0.25);
    let towards = |p: Point| Point::new(vp.x + stop * (p.x - vp.x), vp.y + stop * (p.y - vp.y));
    let edges = [(left, towards(left)), (right, towards(right))];

    let sky_top = [rng.random_range(90.0..150.0), rng.random_range(130.0..190.0), rng.random_range(190.0..250.0)];
    let ground = [rng.random_range(40.0..110.0), rng.random_range(70.0..140.0), rng.random_range(30.0..80.0)];
    let road = rng.random_range(50.0..95.0);
    let paint = rng.random_range(215.0..255.0);
    let half_width = (w.min(h) / 90.0).max(0.9);
    let noise_amp = 18.0;

    let mut image = RgbImage::new(cfg.width, cfg.height);
    for (x, y, px) in image.enumerate_pixels_mut() {
        let p = Point::new(x as f64 + 0.5, y as f64 + 0.5);
        let mut c = if p.y < vp.y {
            let t = p.y / vp.y.max(1.0);
            [sky_top[0] + 40.0 * t, sky_top[1] + 30.0 * t, sky_top[2] + 10.0 * t]
        } else {
            let inside = side(p, vp, left) * side(p, vp, right) < 0.0;
            if inside {
                [road, road, road + 4.0]
            } else {
                ground
            }
        };
        let n: f64 = rng.random_range(-noise_amp..noise_amp);
        for ch in &mut c {
            *ch += n;
        }
        let d = segment_dist(p, edges[0].0, edges[0].1).min(segment_dist(p, edges[1].0, edges[1].1));
        let cover = (half_width + 0.5 - d).clamp(0.0, 1.0);
        for ch in &mut c {
            *ch = *ch * (1.0 - cover) + paint * cover;
        }
        *px = Rgb(c.map(|v| v.round().clamp(0.0, 255.0) as u8));
    }

    SynthSample {
        sample: ImageSample {
            id: format!("synth_{index:04}"),
            image,
            vp,
        },
        edges,
    }
}

/// Renders `n` road scenes whose edges converge at the annotated point.
///
/// Sample `i` depends only on `(seed, i)`.
pub fn synth_dataset(n: usize, seed: u64, cfg: SynthConfig) -> Result<Vec<SynthSample>> {
    if n < 1 {
        return Err(Error::data("synthetic dataset needs at least one sample"));
    }
    if cfg.width < 8 || cfg.height < 8 {
        return Err(Error::config(format!(
            "synthetic images must be at least 8x8, got {}x{}",
            cfg.width, cfg.height
        )));
    }
    Ok((0..n).into_par_iter().map(|i| render(i, seed, cfg)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Intersection of the lines through `a1 b1` and `a2 b2` by Cramer's rule.
    fn intersect((a1, b1): (Point, Point), (a2, b2): (Point, Point)) -> Point {
        let (p, q) = (b1.y - a1.y, a1.x - b1.x);
        let r = p * a1.x + q * a1.y;
        let (s, t) = (b2.y - a2.y, a2.x - b2.x);
        let u = s * a2.x + t * a2.y;
        let det = p * t - q * s;
        Point::new((r * t - q * u) / det, (p * u - r * s) / det)
    }

    #[test]
    fn eight_samples_inside() {
        let cfg = SynthConfig::default();
        let set = synth_dataset(8, 7, cfg).unwrap();
        assert_eq!(set.len(), 8);
        for s in &set {
            let vp = s.sample.vp;
            assert!(vp.x > 0.0 && vp.x < cfg.width as f64);
            assert!(vp.y > 0.0 && vp.y < cfg.height as f64);
            assert_eq!(s.sample.image.dimensions(), (cfg.width, cfg.height));
        }
    }

    #[test]
    fn edges_intersect_at_vp() {
        for s in synth_dataset(32, 3, SynthConfig::default()).unwrap() {
            let x = intersect(s.edges[0], s.edges[1]);
            assert!(x.dist(s.sample.vp) < 0.5, "{:?} vs {:?}", x, s.sample.vp);
        }
    }

    #[test]
    fn deterministic_and_index_local() {
        let cfg = SynthConfig::default();
        let a = synth_dataset(6, 11, cfg).unwrap();
        let b = synth_dataset(6, 11, cfg).unwrap();
        assert_eq!(a, b);
        let c = synth_dataset(3, 11, cfg).unwrap();
        assert_eq!(&a[..3], &c[..]);
        assert_ne!(a[0], synth_dataset(1, 12, cfg).unwrap()[0]);
    }

    #[test]
    fn edges_are_painted() {
        let s = &synth_dataset(1, 5, SynthConfig::default()).unwrap()[0];
        let (a, b) = s.edges[0];
        let mid = Point::new((a.x + b.x) / 2.0, (a.y + b.y) / 2.0);
        if mid.x >= 0.0 && mid.x < 160.0 {
            let px = s.sample.image.get_pixel(mid.x as u32, mid.y as u32);
            assert!(px.0.iter().all(|&v| v > 150), "{px:?}");
        }
    }

    #[test]
    fn rejects_empty() {
        assert!(synth_dataset(0, 1, SynthConfig::default()).is_err());
    }
}
