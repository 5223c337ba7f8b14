use super::Point;
use crate::error::{Error, Result};
use crate::heads::{Heatmap, Scale};

/// Gaussian standard deviation of the heatmap targets, in map cells.
pub const DEFAULT_SIGMA: f64 = 3.0;

fn check_inside(vp: Point, input_size: usize) -> Result<()> {
    let s = input_size as f64;
    if vp.x >= 0.0 && vp.x < s && vp.y >= 0.0 && vp.y < s {
        Ok(())
    } else {
        Err(Error::data(format!(
            "vanishing point ({}, {}) outside the {input_size}x{input_size} input",
            vp.x, vp.y
        )))
    }
}

/// Heatmap target with value `exp(-d^2 / (2 sigma^2))`, where `d` runs from
/// each cell centre to `vp / stride`; zero beyond `3 sigma` and exactly 1 at
/// the containing cell.
pub fn gaussian_target(vp: Point, scale: Scale, input_size: usize, sigma: f64) -> Result<Heatmap> {
    check_inside(vp, input_size)?;
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(Error::config(format!("heatmap sigma must be positive, got {sigma}")));
    }
    let mut map = Heatmap::zeros(scale, input_size);
    let stride = scale.stride() as f64;
    let (cx, cy) = (vp.x / stride, vp.y / stride);
    let radius = 3.0 * sigma;
    let r2 = radius * radius;
    let denom = 2.0 * sigma * sigma;
    let (w, h) = (map.width, map.height);
    let c0 = (cx - radius).floor().max(0.0) as usize;
    let c1 = ((cx + radius).ceil() as usize).min(w - 1);
    let r0 = (cy - radius).floor().max(0.0) as usize;
    let r1 = ((cy + radius).ceil() as usize).min(h - 1);
    for r in r0..=r1 {
        for c in c0..=c1 {
            let d2 = (c as f64 + 0.5 - cx).powi(2) + (r as f64 + 0.5 - cy).powi(2);
            if d2 <= r2 {
                map.values[r * w + c] = (-d2 / denom).exp() as f32;
            }
        }
    }
    let peak_r = (cy.floor() as usize).min(h - 1);
    let peak_c = (cx.floor() as usize).min(w - 1);
    map.values[peak_r * w + peak_c] = 1.0;
    Ok(map)
}

/// Responsible cell and fractional offsets of a point on a grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridTarget {
    /// `(row, col)`
    pub cell: (usize, usize),
    /// `(x, y)` in `[0, 1)`.
    pub offsets: (f64, f64),
}

pub fn grid_target(vp: Point, cell_size: f64, input_size: usize) -> Result<GridTarget> {
    check_inside(vp, input_size)?;
    let gx = vp.x / cell_size;
    let gy = vp.y / cell_size;
    let col = gx.floor();
    let row = gy.floor();
    Ok(GridTarget {
        cell: (row as usize, col as usize),
        offsets: (gx - col, gy - row),
    })
}

/// All training targets for one resized sample.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainTarget {
    pub heatmap_q: Heatmap,
    pub heatmap_h: Heatmap,
    pub grid: GridTarget,
    pub vp_scaled: Point,
}

pub fn make_target(vp_scaled: Point, input_size: usize, sigma: f64, grid_scale: Scale) -> Result<TrainTarget> {
    Ok(TrainTarget {
        heatmap_q: gaussian_target(vp_scaled, Scale::Quarter, input_size, sigma)?,
        heatmap_h: gaussian_target(vp_scaled, Scale::Half, input_size, sigma)?,
        grid: grid_target(vp_scaled, grid_scale.stride() as f64, input_size)?,
        vp_scaled,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heads::{decode, logit, GridPrediction};
    use proptest::prelude::*;

    #[test]
    fn gaussian_peak_and_falloff() {
        // (81, 121) is the centre of half-scale cell (60, 40)
        let m = gaussian_target(Point::new(81.0, 121.0), Scale::Half, 320, 3.0).unwrap();
        assert_eq!(m.get(60, 40), 1.0);
        let v = m.get(60, 43) as f64;
        assert!((v - (-0.5f64).exp()).abs() < 1e-6);
        assert!((v - 0.60653).abs() < 1e-5);
        // beyond 3 sigma
        assert_eq!(m.get(60, 50), 0.0);
        assert_eq!(m.values.len(), 160 * 160);
    }

    #[test]
    fn gaussian_mass_below_analytic() {
        let m = gaussian_target(Point::new(160.0, 160.0), Scale::Quarter, 320, 3.0).unwrap();
        let sum: f64 = m.values.iter().map(|&v| v as f64).sum();
        let analytic = 2.0 * std::f64::consts::PI * 9.0;
        assert!((analytic - 56.55).abs() < 0.01);
        assert!(sum < analytic, "{sum}");
        assert!(sum > 0.9 * analytic);
    }

    #[test]
    fn gaussian_peak_at_containing_cell_off_centre() {
        let vp = Point::new(21.7, 41.2);
        let m = gaussian_target(vp, Scale::Half, 64, 3.0).unwrap();
        assert_eq!(m.get(20, 10), 1.0);
        assert_eq!(m.argmax(), Some((20, 10)));
        let q = gaussian_target(vp, Scale::Quarter, 64, 3.0).unwrap();
        assert_eq!(q.get(10, 5), 1.0);
    }

    #[test]
    fn gaussian_rejects_outside() {
        assert!(gaussian_target(Point::new(320.0, 3.0), Scale::Half, 320, 3.0).is_err());
        assert!(gaussian_target(Point::new(3.0, 3.0), Scale::Half, 320, 0.0).is_err());
    }

    #[test]
    fn grid_target_examples() {
        let g = grid_target(Point::new(21.0, 41.0), 2.0, 320).unwrap();
        assert_eq!(g.cell, (20, 10));
        assert_eq!(g.offsets, (0.5, 0.5));
        let g = grid_target(Point::new(0.0, 0.0), 2.0, 320).unwrap();
        assert_eq!(g, GridTarget { cell: (0, 0), offsets: (0.0, 0.0) });
        assert!(grid_target(Point::new(-1.0, 0.0), 2.0, 320).is_err());
        assert!(grid_target(Point::new(0.0, 320.0), 2.0, 320).is_err());
    }

    fn encode_as_prediction(g: &GridTarget, grid: usize) -> GridPrediction {
        let mut p = GridPrediction::filled(grid, grid, -10.0, 0.0);
        let i = g.cell.0 * grid + g.cell.1;
        p.confidence[i] = 10.0;
        p.offset_x[i] = logit(g.offsets.0);
        p.offset_y[i] = logit(g.offsets.1);
        p
    }

    #[test]
    fn round_trip_exact_on_integer_lattice() {
        // 32 points spanning the grid: offsets land on 0 or 1/2, both exact
        for k in 0..32usize {
            let vp = Point::new((k * 10 + 3) as f64, (319 - k * 9) as f64);
            let g = grid_target(vp, 2.0, 320).unwrap();
            let back = decode(&encode_as_prediction(&g, 160), 2.0).unwrap();
            assert_eq!((back.x, back.y), (vp.x, vp.y));
        }
    }

    proptest! {
        #[test]
        fn round_trip_fractional(x in 0.0f64..319.99, y in 0.0f64..319.99) {
            let g = grid_target(Point::new(x, y), 2.0, 320).unwrap();
            prop_assert!(g.offsets.0 >= 0.0 && g.offsets.0 < 1.0);
            let back = decode(&encode_as_prediction(&g, 160), 2.0).unwrap();
            prop_assert!((back.x - x).abs() < 1e-9 && (back.y - y).abs() < 1e-9);
        }

        #[test]
        fn gaussian_radially_symmetric(cx in 10usize..70, cy in 10usize..70, dx in 0i64..9, dy in 0i64..9) {
            // VP on a cell centre so mirrored cells are exactly equidistant
            let vp = Point::new((cx * 4 + 2) as f64, (cy * 4 + 2) as f64);
            let m = gaussian_target(vp, Scale::Quarter, 320, 3.0).unwrap();
            let at = |r: i64, c: i64| m.get(r as usize, c as usize) as f64;
            let (r, c) = (cy as i64, cx as i64);
            if dx != 0 || dy != 0 {
                let v = at(r + dy, c + dx);
                for (a, b) in [(r - dy, c - dx), (r + dy, c - dx), (r - dy, c + dx), (r + dx, c + dy), (r - dx, c - dy)] {
                    prop_assert!((at(a, b) - v).abs() <= 1e-12);
                }
            }
        }
    }
}
