//! Synthetic textured surfaces with inserted defects, for desk-scale runs.

use std::str::FromStr;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::rbox::{rasterize_rotated_box, RotatedBox};
use super::{DatasetSplit, ImageSample};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DefectKind {
    /// Intensity-shifted filled ellipse.
    Blob,
    /// Thin rotated bar.
    Scratch,
}

impl FromStr for DefectKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blob" => Ok(DefectKind::Blob),
            "scratch" => Ok(DefectKind::Scratch),
            other => Err(Error::Config(format!("unknown defect kind '{other}' (blob | scratch)"))),
        }
    }
}

impl std::fmt::Display for DefectKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DefectKind::Blob => "blob",
            DefectKind::Scratch => "scratch",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_pos: usize,
    pub n_neg: usize,
    /// Square image side in pixels.
    pub size: usize,
    pub defect: DefectKind,
    /// Std-dev of the per-pixel white noise on top of the texture.
    pub noise_level: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self { n_pos: 60, n_neg: 60, size: 128, defect: DefectKind::Blob, noise_level: 0.05 }
    }
}

impl SynthSpec {
    pub fn validate(&self, downsample_factor: usize) -> Result<()> {
        if self.size == 0 || self.size % downsample_factor != 0 {
            return Err(Error::Config(format!(
                "synth.size {} must be a positive multiple of the downsample factor {downsample_factor}",
                self.size
            )));
        }
        if self.size < 16 {
            return Err(Error::Config(format!("synth.size {} is too small (minimum 16)", self.size)));
        }
        if !(self.noise_level.is_finite() && self.noise_level >= 0.0) {
            return Err(Error::Config(format!("synth.noise_level must be >= 0 (got {})", self.noise_level)));
        }
        Ok(())
    }
}

/// Deterministic per seed. Every sample draws from its own ChaCha stream, so
/// changing `n_pos` leaves the negatives untouched and vice versa.
pub fn synth_generate(spec: &SynthSpec, seed: u64) -> DatasetSplit {
    let positives = (0..spec.n_pos)
        .map(|i| {
            let mut rng = stream(seed, 2 * i as u64);
            let mut image = texture(spec, &mut rng);
            let mask = match spec.defect {
                DefectKind::Blob => blob_mask(spec.size, &mut rng),
                DefectKind::Scratch => scratch_mask(spec.size, &mut rng),
            };
            let magnitude = match spec.defect {
                DefectKind::Blob => rng.random_range(0.25..0.4),
                DefectKind::Scratch => rng.random_range(0.3..0.45),
            };
            let shift = if rng.random_bool(0.5) { magnitude } else { -magnitude };
            for ((y, x), &m) in mask.indexed_iter() {
                if m != 0 {
                    let v = &mut image[[y, x, 0]];
                    *v = (*v + shift as f32).clamp(0.0, 1.0);
                }
            }
            ImageSample { id: format!("pos_{i:04}"), image, mask, label: true }
        })
        .collect();
    let negatives = (0..spec.n_neg)
        .map(|i| {
            let mut rng = stream(seed, 2 * i as u64 + 1);
            let image = texture(spec, &mut rng);
            ImageSample { id: format!("neg_{i:04}"), image, mask: Array2::zeros((spec.size, spec.size)), label: false }
        })
        .collect();
    DatasetSplit { name: format!("synth-{}-{seed}", spec.defect), positives, negatives }
}

fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Two octaves of bilinearly interpolated lattice noise plus white noise.
fn texture(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Array3<f32> {
    let n = spec.size;
    let base: f64 = rng.random_range(0.35..0.65);
    let coarse = lattice(n, 16, rng);
    let fine = lattice(n, 4, rng);
    Array3::from_shape_fn((n, n, 1), |(y, x, _)| {
        let white: f64 = StandardNormal.sample(rng);
        let v = base + 0.08 * coarse[[y, x]] + 0.04 * fine[[y, x]] + spec.noise_level * white;
        v.clamp(0.0, 1.0) as f32
    })
}

fn lattice(n: usize, cell: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let g = n / cell + 2;
    let grid: Array2<f64> = Array2::from_shape_fn((g, g), |_| StandardNormal.sample(rng));
    Array2::from_shape_fn((n, n), |(y, x)| {
        let (fy, fx) = (y as f64 / cell as f64, x as f64 / cell as f64);
        let (iy, ix) = (fy as usize, fx as usize);
        let (ty, tx) = (fy - iy as f64, fx - ix as f64);
        let a = grid[[iy, ix]] * (1.0 - tx) + grid[[iy, ix + 1]] * tx;
        let b = grid[[iy + 1, ix]] * (1.0 - tx) + grid[[iy + 1, ix + 1]] * tx;
        a * (1.0 - ty) + b * ty
    })
}

/// Pixel-center coordinate inside the central 3/4 of the image.
fn center(size: usize, rng: &mut ChaCha8Rng) -> f64 {
    let margin = size / 8;
    rng.random_range(margin..size - margin) as f64 + 0.5
}

fn blob_mask(size: usize, rng: &mut ChaCha8Rng) -> Array2<u8> {
    let (cx, cy) = (center(size, rng), center(size, rng));
    let r_min = (size as f64 / 40.0).max(2.0);
    let r_max = (size as f64 / 12.0).max(r_min + 1.0);
    let (a, b) = (rng.random_range(r_min..r_max), rng.random_range(r_min..r_max));
    let (sin, cos) = rng.random_range(0.0..std::f64::consts::PI).sin_cos();
    Array2::from_shape_fn((size, size), |(y, x)| {
        let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
        let (u, v) = (dx * cos + dy * sin, -dx * sin + dy * cos);
        ((u / a).powi(2) + (v / b).powi(2) <= 1.0) as u8
    })
}

fn scratch_mask(size: usize, rng: &mut ChaCha8Rng) -> Array2<u8> {
    let (cx, cy) = (center(size, rng), center(size, rng));
    let length = rng.random_range(size as f64 / 5.0..size as f64 / 2.5);
    let width = rng.random_range(1.5..3.0);
    let angle = rng.random_range(0.0..180.0);
    let b = RotatedBox { cx, cy, w: length, h: width, angle_deg: angle };
    rasterize_rotated_box(&b, size, size)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(n_pos: usize, n_neg: usize, defect: DefectKind) -> SynthSpec {
        SynthSpec { n_pos, n_neg, size: 64, defect, noise_level: 0.05 }
    }

    #[test]
    fn no_positives_means_all_negative() {
        let split = synth_generate(&spec(0, 5, DefectKind::Blob), 1);
        assert!(split.positives.is_empty());
        assert_eq!(split.negatives.len(), 5);
        assert!(split.negatives.iter().all(|s| !s.label && s.mask.iter().all(|&v| v == 0)));
        split.validate().unwrap();
    }

    #[test]
    fn deterministic_per_seed() {
        let a = synth_generate(&spec(3, 3, DefectKind::Scratch), 9);
        let b = synth_generate(&spec(3, 3, DefectKind::Scratch), 9);
        let c = synth_generate(&spec(3, 3, DefectKind::Scratch), 10);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn negatives_independent_of_positive_count() {
        let a = synth_generate(&spec(1, 3, DefectKind::Blob), 2);
        let b = synth_generate(&spec(4, 3, DefectKind::Blob), 2);
        assert_eq!(a.negatives, b.negatives);
    }

    #[test]
    fn pixel_range_and_shapes() {
        let split = synth_generate(&spec(2, 2, DefectKind::Blob), 0);
        for s in split.samples() {
            assert_eq!(s.image.dim(), (64, 64, 1));
            assert!(s.image.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn defects_change_the_masked_pixels_only() {
        let sp = spec(1, 0, DefectKind::Blob);
        let split = synth_generate(&sp, 5);
        let s = &split.positives[0];
        let inside: Vec<f32> = s.mask.indexed_iter().filter(|(_, &m)| m == 1).map(|((y, x), _)| s.image[[y, x, 0]]).collect();
        let outside: Vec<f32> = s.mask.indexed_iter().filter(|(_, &m)| m == 0).map(|((y, x), _)| s.image[[y, x, 0]]).collect();
        let mean = |v: &[f32]| v.iter().sum::<f32>() / v.len() as f32;
        assert!((mean(&inside) - mean(&outside)).abs() > 0.15);
    }

    #[test]
    fn size_validation() {
        let mut sp = spec(1, 1, DefectKind::Blob);
        sp.size = 100;
        assert!(sp.validate(8).is_err());
        sp.size = 96;
        assert!(sp.validate(8).is_ok());
        assert!("dent".parse::<DefectKind>().is_err());
    }
}
