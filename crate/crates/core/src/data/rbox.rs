use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rectangle annotation in pixel coordinates; the image's top-left corner is
/// (0, 0) and pixel (x, y) has its center at (x + 0.5, y + 0.5).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RotatedBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub angle_deg: f64,
}

impl RotatedBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64, angle_deg: f64) -> Result<Self> {
        let b = Self { cx, cy, w, h, angle_deg };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.cx, self.cy, self.w, self.h, self.angle_deg].iter().all(|v| v.is_finite());
        if !finite || self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::Data(format!("invalid rotated box {self:?}")));
        }
        Ok(())
    }

    /// Point-in-rectangle test in image coordinates.
    pub fn contains(&self, px: f64, py: f64) -> bool {
        const EPS: f64 = 1e-9;
        let (sin, cos) = self.angle_deg.to_radians().sin_cos();
        let (dx, dy) = (px - self.cx, py - self.cy);
        let u = dx * cos + dy * sin;
        let v = -dx * sin + dy * cos;
        u.abs() <= self.w / 2.0 + EPS && v.abs() <= self.h / 2.0 + EPS
    }

    fn half_extent(&self) -> (f64, f64) {
        let (sin, cos) = self.angle_deg.to_radians().sin_cos();
        let ex = (self.w * cos).abs() / 2.0 + (self.h * sin).abs() / 2.0;
        let ey = (self.w * sin).abs() / 2.0 + (self.h * cos).abs() / 2.0;
        (ex, ey)
    }
}

/// Marks every pixel whose center lies inside the box; clipped to the image.
pub fn rasterize_rotated_box(b: &RotatedBox, height: usize, width: usize) -> Array2<u8> {
    let mut mask = Array2::zeros((height, width));
    rasterize_into(b, &mut mask);
    mask
}

/// Adds the box to an existing mask (union).
pub fn rasterize_into(b: &RotatedBox, mask: &mut Array2<u8>) {
    let (height, width) = mask.dim();
    let (ex, ey) = b.half_extent();
    let range = |c: f64, e: f64, n: usize| {
        let lo = (c - e - 1.0).floor().max(0.0) as usize;
        let hi = ((c + e + 1.0).ceil().max(0.0) as usize).min(n);
        lo..hi
    };
    for y in range(b.cy, ey, height) {
        for x in range(b.cx, ex, width) {
            if b.contains(x as f64 + 0.5, y as f64 + 0.5) {
                mask[[y, x]] = 1;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn axis_aligned_rectangle() {
        let b = RotatedBox::new(4.0, 4.0, 4.0, 2.0, 0.0).unwrap();
        let m = rasterize_rotated_box(&b, 16, 16);
        assert_eq!(m.iter().filter(|&&v| v == 1).count(), 8);
        for y in 3..5 {
            for x in 2..6 {
                assert_eq!(m[[y, x]], 1);
            }
        }
    }

    #[test]
    fn quarter_turn_equals_swapped_sides() {
        let a = RotatedBox::new(7.3, 5.1, 6.0, 3.0, 90.0).unwrap();
        let b = RotatedBox::new(7.3, 5.1, 3.0, 6.0, 0.0).unwrap();
        assert_eq!(rasterize_rotated_box(&a, 16, 16), rasterize_rotated_box(&b, 16, 16));
    }

    #[test]
    fn out_of_bounds_is_empty_and_partial_is_clipped() {
        let far = RotatedBox::new(-40.0, 100.0, 5.0, 5.0, 30.0).unwrap();
        assert!(rasterize_rotated_box(&far, 16, 16).iter().all(|&v| v == 0));
        let edge = RotatedBox::new(0.0, 0.0, 4.0, 4.0, 0.0).unwrap();
        assert_eq!(rasterize_rotated_box(&edge, 16, 16).iter().filter(|&&v| v == 1).count(), 4);
    }

    #[test]
    fn invalid_box() {
        assert!(RotatedBox::new(0.0, 0.0, 0.0, 1.0, 0.0).is_err());
        assert!(RotatedBox::new(0.0, 0.0, 1.0, f64::NAN, 0.0).is_err());
    }

    // Supersampled coverage (16 x 16 points per pixel) as an area oracle.
    #[test]
    fn diagonal_square_area_matches_supersampling() {
        let b = RotatedBox::new(32.0, 32.0, 20.0, 20.0, 45.0).unwrap();
        let m = rasterize_rotated_box(&b, 64, 64);
        let count = m.iter().filter(|&&v| v == 1).count() as f64;
        let mut covered = 0usize;
        for y in 0..64 {
            for x in 0..64 {
                for sy in 0..16 {
                    for sx in 0..16 {
                        let px = x as f64 + (sx as f64 + 0.5) / 16.0;
                        let py = y as f64 + (sy as f64 + 0.5) / 16.0;
                        covered += b.contains(px, py) as usize;
                    }
                }
            }
        }
        let area = covered as f64 / 256.0;
        assert!((count - area).abs() / area < 0.05, "{count} vs {area}");
    }

    proptest! {
        #[test]
        fn half_turn_invariance(cx in 0.0f64..32.0, cy in 0.0f64..32.0, w in 0.5f64..20.0, h in 0.5f64..20.0, a in -180.0f64..180.0) {
            let b1 = RotatedBox::new(cx, cy, w, h, a).unwrap();
            let b2 = RotatedBox::new(cx, cy, w, h, a + 180.0).unwrap();
            prop_assert_eq!(rasterize_rotated_box(&b1, 32, 32), rasterize_rotated_box(&b2, 32, 32));
        }
    }
}
