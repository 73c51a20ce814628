//! Distance-transform weighting of positive pixels.
//!
//! Each positive pixel is weighted by `w_pos * (D / D_max)^p`, where `D` is
//! its Euclidean distance to the nearest negative pixel and `D_max` is the
//! largest such distance inside its 8-connected positive region. Negative
//! pixels keep weight 1.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightParams {
    pub w_pos: f64,
    pub p: f64,
}

impl WeightParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.w_pos.is_finite() && self.w_pos > 0.0) {
            return Err(Error::Config(format!("w_pos must be a positive number (got {})", self.w_pos)));
        }
        if !(self.p.is_finite() && self.p >= 0.0) {
            return Err(Error::Config(format!("p must be a non-negative number (got {})", self.p)));
        }
        Ok(())
    }

    /// The polynomial scaling of a normalized distance in [0, 1].
    pub fn scale(&self, normalized_distance: f64) -> f64 {
        self.w_pos * normalized_distance.powf(self.p)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightMask {
    pub weights: Array2<f32>,
    pub params: WeightParams,
}

impl WeightMask {
    pub fn uniform(shape: (usize, usize), params: WeightParams) -> Self {
        Self { weights: Array2::ones(shape), params }
    }

    /// Writes the mask as an 8-bit grayscale PNG with `w_pos` mapped to white.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (h, w) = self.weights.dim();
        let scale = 255.0 / self.params.w_pos;
        let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
            let v = self.weights[[y as usize, x as usize]] as f64 * scale;
            image::Luma([v.round().clamp(0.0, 255.0) as u8])
        });
        img.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
    }
}

/// Weight mask for a binary target (nonzero = positive).
pub fn compute_weight_mask(target: &Array2<u8>, w_pos: f64, p: f64, dt_enabled: bool) -> Result<WeightMask> {
    let params = WeightParams { w_pos, p };
    params.validate()?;
    let mut weights = Array2::<f32>::ones(target.dim());
    if !target.iter().any(|&v| v != 0) {
        return Ok(WeightMask { weights, params });
    }
    let has_negative = target.iter().any(|&v| v == 0);
    if !dt_enabled || !has_negative {
        for (w, &t) in weights.iter_mut().zip(target.iter()) {
            if t != 0 {
                *w = w_pos as f32;
            }
        }
        return Ok(WeightMask { weights, params });
    }

    let dist = distance_to_negative(target);
    let (labels, regions) = label_regions(target);
    let mut region_max = vec![0.0f64; regions];
    for (d, &l) in dist.iter().zip(labels.iter()) {
        if l > 0 {
            let m = &mut region_max[l - 1];
            *m = m.max(*d);
        }
    }
    for ((w, d), &l) in weights.iter_mut().zip(dist.iter()).zip(labels.iter()) {
        if l > 0 {
            *w = params.scale(*d / region_max[l - 1]) as f32;
        }
    }
    Ok(WeightMask { weights, params })
}

/// Exact Euclidean distance from every pixel to the nearest zero pixel
/// (zero on negatives, +inf everywhere when there is no negative pixel).
pub fn distance_to_negative(target: &Array2<u8>) -> Array2<f64> {
    let (h, w) = target.dim();
    let mut sq = target.mapv(|v| if v == 0 { 0.0 } else { f64::INFINITY });
    let mut scratch = Envelope::default();

    let mut col_in = vec![0.0; h];
    let mut col_out = vec![0.0; h];
    for x in 0..w {
        for y in 0..h {
            col_in[y] = sq[[y, x]];
        }
        scratch.transform(&col_in, &mut col_out);
        for y in 0..h {
            sq[[y, x]] = col_out[y];
        }
    }
    let mut row_out = vec![0.0; w];
    for y in 0..h {
        let row: Vec<f64> = sq.row(y).to_vec();
        scratch.transform(&row, &mut row_out);
        for x in 0..w {
            sq[[y, x]] = row_out[x];
        }
    }
    sq.mapv_inplace(f64::sqrt);
    sq
}

/// Lower envelope of parabolas for the 1D squared distance transform.
/// Infinite sites are skipped, so all arithmetic stays on exact integers
/// until the final intersection comparisons.
#[derive(Default)]
struct Envelope {
    sites: Vec<usize>,
    bounds: Vec<f64>,
}

impl Envelope {
    fn transform(&mut self, f: &[f64], out: &mut [f64]) {
        self.sites.clear();
        self.bounds.clear();
        for q in 0..f.len() {
            if f[q].is_infinite() {
                continue;
            }
            loop {
                let Some(&v) = self.sites.last() else {
                    self.sites.push(q);
                    self.bounds.push(f64::NEG_INFINITY);
                    break;
                };
                let (qf, vf) = (q as f64, v as f64);
                let s = ((f[q] + qf * qf) - (f[v] + vf * vf)) / (2.0 * qf - 2.0 * vf);
                if s <= *self.bounds.last().unwrap() {
                    self.sites.pop();
                    self.bounds.pop();
                } else {
                    self.sites.push(q);
                    self.bounds.push(s);
                    break;
                }
            }
        }
        if self.sites.is_empty() {
            out.fill(f64::INFINITY);
            return;
        }
        let mut k = 0;
        for (q, o) in out.iter_mut().enumerate() {
            while k + 1 < self.sites.len() && self.bounds[k + 1] < q as f64 {
                k += 1;
            }
            let d = q as f64 - self.sites[k] as f64;
            *o = d * d + f[self.sites[k]];
        }
    }
}

/// 8-connected labelling of nonzero pixels. Labels start at 1; 0 is background.
pub fn label_regions(mask: &Array2<u8>) -> (Array2<usize>, usize) {
    let (h, w) = mask.dim();
    let mut labels = Array2::<usize>::zeros((h, w));
    let mut next = 0;
    let mut stack = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if mask[[y, x]] == 0 || labels[[y, x]] != 0 {
                continue;
            }
            next += 1;
            labels[[y, x]] = next;
            stack.push((y, x));
            while let Some((cy, cx)) = stack.pop() {
                for ny in cy.saturating_sub(1)..=(cy + 1).min(h - 1) {
                    for nx in cx.saturating_sub(1)..=(cx + 1).min(w - 1) {
                        if mask[[ny, nx]] != 0 && labels[[ny, nx]] == 0 {
                            labels[[ny, nx]] = next;
                            stack.push((ny, nx));
                        }
                    }
                }
            }
        }
    }
    (labels, next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn all_negative_mask_is_uniform() {
        let m = Array2::<u8>::zeros((5, 6));
        let wm = compute_weight_mask(&m, 20.0, 1.0, true).unwrap();
        assert!(wm.weights.iter().all(|&w| w == 1.0));
    }

    #[test]
    fn row_profile() {
        let m = array![[0u8, 1, 1, 1, 1, 1, 0]];
        let wm = compute_weight_mask(&m, 1.0, 1.0, true).unwrap();
        let expected = [1.0, 1.0 / 3.0, 2.0 / 3.0, 1.0, 2.0 / 3.0, 1.0 / 3.0, 1.0];
        for (w, e) in wm.weights.iter().zip(expected) {
            assert!((*w as f64 - e).abs() < 1e-6, "{:?}", wm.weights);
        }
    }

    #[test]
    fn region_center_gets_full_weight() {
        let mut m = Array2::<u8>::zeros((9, 9));
        m.slice_mut(ndarray::s![2..7, 2..7]).fill(1);
        let wm = compute_weight_mask(&m, 20.0, 1.0, true).unwrap();
        assert_eq!(wm.weights[[4, 4]], 20.0);
        assert!(wm.weights[[2, 2]] < 20.0 && wm.weights[[2, 2]] > 0.0);
    }

    #[test]
    fn all_positive_mask_is_degenerate() {
        let m = Array2::<u8>::ones((4, 4));
        let wm = compute_weight_mask(&m, 3.0, 2.0, true).unwrap();
        assert!(wm.weights.iter().all(|&w| w == 3.0));
    }

    #[test]
    fn disabled_transform_gives_flat_positive_weight() {
        let m = array![[0u8, 1, 1, 1, 0]];
        let wm = compute_weight_mask(&m, 5.0, 2.0, false).unwrap();
        assert_eq!(wm.weights.row(0).to_vec(), vec![1.0, 5.0, 5.0, 5.0, 1.0]);
    }

    #[test]
    fn regions_normalize_separately() {
        // A wide and a thin region: each must reach w_pos at its own center.
        let mut m = Array2::<u8>::zeros((12, 12));
        m.slice_mut(ndarray::s![1..8, 1..8]).fill(1);
        m.slice_mut(ndarray::s![10..11, 1..11]).fill(1);
        let wm = compute_weight_mask(&m, 2.0, 1.0, true).unwrap();
        assert_eq!(wm.weights[[4, 4]], 2.0);
        assert!(wm.weights.slice(ndarray::s![10, 1..11]).iter().all(|&w| w == 2.0));
        let (_, n) = label_regions(&m);
        assert_eq!(n, 2);
    }

    #[test]
    fn diagonal_pixels_are_one_region() {
        let m = array![[1u8, 0, 0], [0, 1, 0], [0, 0, 1]];
        assert_eq!(label_regions(&m).1, 1);
    }

    #[test]
    fn invalid_params() {
        let m = Array2::<u8>::zeros((2, 2));
        assert!(compute_weight_mask(&m, 0.0, 1.0, true).is_err());
        assert!(compute_weight_mask(&m, 1.0, -1.0, true).is_err());
    }

    #[test]
    fn png_export() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.png");
        let m = array![[0u8, 1, 1, 1, 0]];
        compute_weight_mask(&m, 4.0, 1.0, true).unwrap().save_png(&path).unwrap();
        let img = image::open(&path).unwrap().to_luma8();
        assert_eq!(img.get_pixel(2, 0).0[0], 255);
        assert_eq!(img.get_pixel(0, 0).0[0], 64);
    }
}
