//! Samples, splits and mask utilities.

mod load;
mod rbox;
mod synth;

pub use load::{load_dataset, read_annotations, write_mask_folders, Layout};
pub use rbox::{rasterize_rotated_box, RotatedBox};
pub use synth::{synth_generate, DefectKind, SynthSpec};

use std::collections::HashSet;

use ndarray::{s, Array2, Array3};

use crate::error::{Error, Result};

/// One image with its pixel-level mask and image-level label.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub id: String,
    /// H x W x C, values in [0, 1].
    pub image: Array3<f32>,
    /// H x W, 1 = defective pixel.
    pub mask: Array2<u8>,
    pub label: bool,
}

impl ImageSample {
    pub fn new(id: impl Into<String>, image: Array3<f32>, mask: Array2<u8>, label: bool) -> Result<Self> {
        let id = id.into();
        let (h, w, _) = image.dim();
        if mask.dim() != (h, w) {
            return Err(Error::Data(format!("{id}: mask {:?} does not match image {h}x{w}", mask.dim())));
        }
        if !label && mask_has_defect(&mask) {
            return Err(Error::Data(format!("{id}: labelled negative but its mask has defective pixels")));
        }
        Ok(Self { id, image, mask, label })
    }

    pub fn height(&self) -> usize {
        self.image.dim().0
    }

    pub fn width(&self) -> usize {
        self.image.dim().1
    }

    pub fn channels(&self) -> usize {
        self.image.dim().2
    }

    /// Zero-pads bottom/right so both dims are multiples of `factor`.
    pub fn padded_to(&self, factor: usize) -> ImageSample {
        let (h, w, c) = self.image.dim();
        let (ph, pw) = (h.div_ceil(factor) * factor, w.div_ceil(factor) * factor);
        if (ph, pw) == (h, w) {
            return self.clone();
        }
        let mut image = Array3::zeros((ph, pw, c));
        image.slice_mut(s![..h, ..w, ..]).assign(&self.image);
        let mut mask = Array2::zeros((ph, pw));
        mask.slice_mut(s![..h, ..w]).assign(&self.mask);
        ImageSample { id: self.id.clone(), image, mask, label: self.label }
    }
}

pub fn mask_has_defect(mask: &Array2<u8>) -> bool {
    mask.iter().any(|&v| v != 0)
}

/// Positive and negative samples of one dataset (or fold).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetSplit {
    pub name: String,
    pub positives: Vec<ImageSample>,
    pub negatives: Vec<ImageSample>,
}

impl DatasetSplit {
    pub fn new(name: impl Into<String>, positives: Vec<ImageSample>, negatives: Vec<ImageSample>) -> Result<Self> {
        let split = Self { name: name.into(), positives, negatives };
        split.validate()?;
        Ok(split)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for s in self.positives.iter().chain(&self.negatives) {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::Data(format!("{}: duplicate sample id {}", self.name, s.id)));
            }
        }
        if let Some(s) = self.positives.iter().find(|s| !s.label) {
            return Err(Error::Data(format!("{}: {} is in the positive list but labelled negative", self.name, s.id)));
        }
        if let Some(s) = self.negatives.iter().find(|s| s.label) {
            return Err(Error::Data(format!("{}: {} is in the negative list but labelled positive", self.name, s.id)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.positives.len() + self.negatives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Positives followed by negatives.
    pub fn samples(&self) -> impl Iterator<Item = &ImageSample> {
        self.positives.iter().chain(&self.negatives)
    }

    /// Moves the trailing `fraction` of each class into a second split.
    pub fn holdout(mut self, fraction: f64) -> Result<(DatasetSplit, DatasetSplit)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::Config(format!("holdout fraction must lie in [0, 1) (got {fraction})")));
        }
        let cut = |n: usize| n - (n as f64 * fraction).round() as usize;
        let test_pos = self.positives.split_off(cut(self.positives.len()));
        let test_neg = self.negatives.split_off(cut(self.negatives.len()));
        let test = DatasetSplit { name: format!("{}-test", self.name), positives: test_pos, negatives: test_neg };
        self.name = format!("{}-train", self.name);
        Ok((self, test))
    }

    /// Disjoint union; ids must not collide.
    pub fn merged(&self, other: &DatasetSplit, name: impl Into<String>) -> Result<DatasetSplit> {
        DatasetSplit::new(
            name,
            self.positives.iter().chain(&other.positives).cloned().collect(),
            self.negatives.iter().chain(&other.negatives).cloned().collect(),
        )
    }
}

/// Block-max pooling: an output pixel is positive iff any pixel of its
/// `factor x factor` block is.
pub fn downsample_mask(mask: &Array2<u8>, factor: usize) -> Result<Array2<u8>> {
    let (h, w) = mask.dim();
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::Shape(format!("mask {h}x{w} is not divisible by {factor}")));
    }
    Ok(Array2::from_shape_fn((h / factor, w / factor), |(y, x)| {
        let block = mask.slice(s![y * factor..(y + 1) * factor, x * factor..(x + 1) * factor]);
        block.iter().any(|&v| v != 0) as u8
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn block_scan(mask: &Array2<u8>, d: usize) -> Array2<u8> {
        let (h, w) = mask.dim();
        let mut out = Array2::zeros((h / d, w / d));
        for y in 0..h {
            for x in 0..w {
                if mask[[y, x]] != 0 {
                    out[[y / d, x / d]] = 1;
                }
            }
        }
        out
    }

    #[test]
    fn downsample_examples() {
        let z = Array2::<u8>::zeros((8, 8));
        assert_eq!(downsample_mask(&z, 8).unwrap(), Array2::<u8>::zeros((1, 1)));
        for (y, x) in [(0, 0), (7, 7), (3, 5)] {
            let mut m = z.clone();
            m[[y, x]] = 1;
            assert_eq!(downsample_mask(&m, 8).unwrap()[[0, 0]], 1);
        }
        assert!(matches!(downsample_mask(&Array2::zeros((10, 8)), 8), Err(Error::Shape(_))));
    }

    proptest! {
        #[test]
        fn downsample_matches_block_scan(bits in proptest::collection::vec(0u8..2, 32 * 32), d in prop::sample::select(vec![1usize, 2, 4, 8, 16, 32])) {
            let m = Array2::from_shape_vec((32, 32), bits).unwrap();
            prop_assert_eq!(downsample_mask(&m, d).unwrap(), block_scan(&m, d));
        }

        #[test]
        fn downsample_is_positive_monotone(bits in proptest::collection::vec(0u8..2, 16 * 16), extra in proptest::collection::vec(0usize..256, 1..10)) {
            let m = Array2::from_shape_vec((16, 16), bits).unwrap();
            let mut more = m.clone();
            for i in extra {
                more[[i / 16, i % 16]] = 1;
            }
            let a = downsample_mask(&m, 4).unwrap();
            let b = downsample_mask(&more, 4).unwrap();
            prop_assert!(a.iter().zip(b.iter()).all(|(&x, &y)| y >= x));
        }
    }

    #[test]
    fn negative_label_with_defect_rejected() {
        let mut mask = Array2::zeros((4, 4));
        mask[[1, 1]] = 1;
        assert!(ImageSample::new("a", Array3::zeros((4, 4, 1)), mask, false).is_err());
        assert!(ImageSample::new("a", Array3::zeros((4, 4, 1)), Array2::zeros((3, 4)), false).is_err());
    }

    #[test]
    fn padding_is_bottom_right() {
        let mut mask = Array2::zeros((5, 6));
        mask[[4, 5]] = 1;
        let s = ImageSample::new("p", Array3::from_elem((5, 6, 1), 0.5), mask, true).unwrap();
        let p = s.padded_to(4);
        assert_eq!(p.image.dim(), (8, 8, 1));
        assert_eq!(p.mask[[4, 5]], 1);
        assert_eq!(p.image[[7, 7, 0]], 0.0);
        assert_eq!(p.image[[0, 0, 0]], 0.5);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let n = |id: &str| ImageSample::new(id, Array3::zeros((2, 2, 1)), Array2::zeros((2, 2)), false).unwrap();
        let mut p = n("x");
        p.label = true;
        assert!(DatasetSplit::new("d", vec![p], vec![n("x")]).is_err());
        assert!(DatasetSplit::new("d", vec![], vec![n("x"), n("y")]).is_ok());
    }

    #[test]
    fn holdout_splits_tail() {
        let n = |id: String| ImageSample::new(id, Array3::zeros((2, 2, 1)), Array2::zeros((2, 2)), false).unwrap();
        let split = DatasetSplit::new("d", vec![], (0..9).map(|i| n(format!("n{i}"))).collect()).unwrap();
        let (train, test) = split.holdout(1.0 / 3.0).unwrap();
        assert_eq!(train.negatives.len(), 6);
        assert_eq!(test.negatives.len(), 3);
        assert_eq!(test.negatives[0].id, "n6");
    }
}
