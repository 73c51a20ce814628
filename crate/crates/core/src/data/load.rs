//! On-disk dataset layouts.
//!
//! `mask_folders`:
//!   root/pos/*.png, root/pos_masks/<same name>.png (nonzero = defect), root/neg/*.png
//!
//! `rotated_box_index`:
//!   root/images/*.png and root/annotations.tsv with rows
//!   `id cx cy w h angle_deg`; several rows per id are unioned and images
//!   without rows are negatives.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{DynamicImage, GrayImage};
use ndarray::{Array2, Array3};

use super::rbox::{rasterize_into, RotatedBox};
use super::{mask_has_defect, DatasetSplit, ImageSample};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    MaskFolders,
    RotatedBoxIndex,
}

impl FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mask_folders" => Ok(Layout::MaskFolders),
            "rotated_box_index" => Ok(Layout::RotatedBoxIndex),
            other => Err(Error::Config(format!("unknown dataset layout '{other}' (mask_folders | rotated_box_index)"))),
        }
    }
}

impl std::fmt::Display for Layout {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Layout::MaskFolders => "mask_folders",
            Layout::RotatedBoxIndex => "rotated_box_index",
        })
    }
}

pub fn load_dataset(root: &Path, layout: Layout) -> Result<DatasetSplit> {
    if !root.is_dir() {
        return Err(Error::Data(format!("dataset root {} is not a directory", root.display())));
    }
    let name = root.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "dataset".into());
    let (positives, negatives) = match layout {
        Layout::MaskFolders => load_mask_folders(root)?,
        Layout::RotatedBoxIndex => load_rotated_box_index(root)?,
    };
    if positives.is_empty() {
        return Err(Error::Data(format!("{}: no positive images", root.display())));
    }
    DatasetSplit::new(name, positives, negatives)
}

fn load_mask_folders(root: &Path) -> Result<(Vec<ImageSample>, Vec<ImageSample>)> {
    let mask_dir = root.join("pos_masks");
    let mut positives = Vec::new();
    for path in png_files(&root.join("pos"))? {
        let id = stem(&path);
        let image = read_image(&path)?;
        let mask_path = mask_dir.join(path.file_name().unwrap());
        if !mask_path.is_file() {
            return Err(Error::Data(format!("missing mask {} for positive image {}", mask_path.display(), path.display())));
        }
        let mask = read_mask(&mask_path)?;
        if !mask_has_defect(&mask) {
            return Err(Error::Data(format!("positive image {} has an all-zero mask", path.display())));
        }
        positives.push(ImageSample::new(id, image, mask, true)?);
    }
    let mut negatives = Vec::new();
    for path in png_files(&root.join("neg"))? {
        let image = read_image(&path)?;
        let (h, w, _) = image.dim();
        negatives.push(ImageSample::new(stem(&path), image, Array2::zeros((h, w)), false)?);
    }
    Ok((positives, negatives))
}

/// Parses `annotations.tsv`; an optional header row starting with `id` is skipped.
pub fn read_annotations(path: &Path) -> Result<BTreeMap<String, Vec<RotatedBox>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let mut boxes: BTreeMap<String, Vec<RotatedBox>> = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        if lineno == 0 && cols.first() == Some(&"id") {
            continue;
        }
        let bad = || Error::Data(format!("{}:{}: expected 'id cx cy w h angle_deg'", path.display(), lineno + 1));
        if cols.len() != 6 {
            return Err(bad());
        }
        let nums: Vec<f64> = cols[1..].iter().map(|c| c.parse::<f64>()).collect::<std::result::Result<_, _>>().map_err(|_| bad())?;
        let b = RotatedBox::new(nums[0], nums[1], nums[2], nums[3], nums[4])
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        boxes.entry(cols[0].to_string()).or_default().push(b);
    }
    Ok(boxes)
}

fn load_rotated_box_index(root: &Path) -> Result<(Vec<ImageSample>, Vec<ImageSample>)> {
    let mut boxes = read_annotations(&root.join("annotations.tsv"))?;
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for path in png_files(&root.join("images"))? {
        let id = stem(&path);
        let image = read_image(&path)?;
        let (h, w, _) = image.dim();
        let mut mask = Array2::zeros((h, w));
        match boxes.remove(&id) {
            Some(list) => {
                for b in &list {
                    rasterize_into(b, &mut mask);
                }
                if !mask_has_defect(&mask) {
                    return Err(Error::Data(format!("{id}: annotated boxes fall entirely outside the image")));
                }
                positives.push(ImageSample::new(id, image, mask, true)?);
            }
            None => negatives.push(ImageSample::new(id, image, mask, false)?),
        }
    }
    if let Some(id) = boxes.keys().next() {
        return Err(Error::Data(format!("annotation for '{id}' has no matching image")));
    }
    Ok((positives, negatives))
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::Data(format!("missing directory {}", dir.display())));
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn open(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// Grayscale images load as one channel, anything with color as RGB.
fn read_image(path: &Path) -> Result<Array3<f32>> {
    let img = open(path)?;
    if img.color().has_color() {
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        Ok(Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
            rgb.get_pixel(x as u32, y as u32).0[c] as f32 / 255.0
        }))
    } else {
        let g = img.to_luma8();
        let (w, h) = g.dimensions();
        Ok(Array3::from_shape_fn((h as usize, w as usize, 1), |(y, x, _)| g.get_pixel(x as u32, y as u32).0[0] as f32 / 255.0))
    }
}

fn read_mask(path: &Path) -> Result<Array2<u8>> {
    let g = open(path)?.to_luma8();
    let (w, h) = g.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| (g.get_pixel(x as u32, y as u32).0[0] != 0) as u8))
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn save_image(image: &Array3<f32>, path: &Path) -> Result<()> {
    let (h, w, c) = image.dim();
    let result = match c {
        1 => GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([to_u8(image[[y as usize, x as usize, 0]])])).save(path),
        3 => image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            image::Rgb(std::array::from_fn(|k| to_u8(image[[y as usize, x as usize, k]])))
        })
        .save(path),
        _ => return Err(Error::Data(format!("cannot write a {c}-channel image as PNG"))),
    };
    result.map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// Writes a split in the `mask_folders` layout (masks as 0/255).
pub fn write_mask_folders(split: &DatasetSplit, root: &Path) -> Result<()> {
    for sub in ["pos", "pos_masks", "neg"] {
        std::fs::create_dir_all(root.join(sub))?;
    }
    for s in &split.positives {
        save_image(&s.image, &root.join("pos").join(format!("{}.png", s.id)))?;
        let (h, w) = s.mask.dim();
        let mask = GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([s.mask[[y as usize, x as usize]] * 255]));
        let path = root.join("pos_masks").join(format!("{}.png", s.id));
        mask.save(&path).map_err(|source| Error::Image { path, source })?;
    }
    for s in &split.negatives {
        save_image(&s.image, &root.join("neg").join(format!("{}.png", s.id)))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(path: &Path, w: u32, h: u32, f: impl Fn(u32, u32) -> u8) {
        GrayImage::from_fn(w, h, |x, y| image::Luma([f(x, y)])).save(path).unwrap();
    }

    fn toy(root: &Path, n_pos: usize, n_neg: usize) {
        for d in ["pos", "pos_masks", "neg"] {
            std::fs::create_dir_all(root.join(d)).unwrap();
        }
        for i in 0..n_pos {
            gray(&root.join(format!("pos/p{i}.png")), 8, 8, |x, _| (x * 20) as u8);
            gray(&root.join(format!("pos_masks/p{i}.png")), 8, 8, |x, y| if x == 3 && y == 4 { 255 } else { 0 });
        }
        for i in 0..n_neg {
            gray(&root.join(format!("neg/n{i}.png")), 8, 8, |_, y| (y * 10) as u8);
        }
    }

    #[test]
    fn loads_toy_mask_folders() {
        let dir = tempfile::tempdir().unwrap();
        toy(dir.path(), 2, 2);
        let split = load_dataset(dir.path(), Layout::MaskFolders).unwrap();
        assert_eq!(split.positives.len(), 2);
        assert_eq!(split.negatives.len(), 2);
        assert_eq!(split.positives[0].id, "p0");
        assert_eq!(split.positives[0].mask[[4, 3]], 1);
        assert_eq!(split.positives[0].mask.iter().map(|&v| v as usize).sum::<usize>(), 1);
        assert_eq!(split.positives[0].image.dim(), (8, 8, 1));
        assert!((split.negatives[1].image[[2, 0, 0]] - 20.0 / 255.0).abs() < 1e-6);
    }

    #[test]
    fn empty_positive_folder_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        toy(dir.path(), 0, 2);
        assert!(matches!(load_dataset(dir.path(), Layout::MaskFolders), Err(Error::Data(_))));
    }

    #[test]
    fn all_zero_positive_mask_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        toy(dir.path(), 1, 1);
        gray(&dir.path().join("pos_masks/p0.png"), 8, 8, |_, _| 0);
        assert!(matches!(load_dataset(dir.path(), Layout::MaskFolders), Err(Error::Data(_))));
    }

    #[test]
    fn missing_mask_and_unreadable_image() {
        let dir = tempfile::tempdir().unwrap();
        toy(dir.path(), 1, 1);
        std::fs::remove_file(dir.path().join("pos_masks/p0.png")).unwrap();
        let err = load_dataset(dir.path(), Layout::MaskFolders).unwrap_err();
        assert!(err.to_string().contains("p0.png"));

        toy(dir.path(), 1, 1);
        std::fs::write(dir.path().join("neg/broken.png"), b"not a png").unwrap();
        let err = load_dataset(dir.path(), Layout::MaskFolders).unwrap_err();
        assert!(err.to_string().contains("broken.png"), "{err}");
    }

    #[test]
    fn rotated_box_index_layout() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("images")).unwrap();
        for id in ["a", "b", "c"] {
            gray(&dir.path().join(format!("images/{id}.png")), 16, 16, |_, _| 100);
        }
        std::fs::write(
            dir.path().join("annotations.tsv"),
            "id\tcx\tcy\tw\th\tangle_deg\na\t4\t4\t4\t2\t0\na\t12\t12\t2\t2\t0\nc\t8\t8\t4\t4\t45\n",
        )
        .unwrap();
        let split = load_dataset(dir.path(), Layout::RotatedBoxIndex).unwrap();
        assert_eq!(split.positives.iter().map(|s| s.id.as_str()).collect::<Vec<_>>(), vec!["a", "c"]);
        assert_eq!(split.negatives[0].id, "b");
        assert_eq!(split.positives[0].mask.iter().filter(|&&v| v == 1).count(), 12);

        std::fs::write(dir.path().join("annotations.tsv"), "zzz 1 1 1 1 0\n").unwrap();
        assert!(load_dataset(dir.path(), Layout::RotatedBoxIndex).is_err());
        std::fs::write(dir.path().join("annotations.tsv"), "a 1 1 1\n").unwrap();
        assert!(load_dataset(dir.path(), Layout::RotatedBoxIndex).is_err());
    }

    #[test]
    fn layout_parsing() {
        assert_eq!("mask_folders".parse::<Layout>().unwrap(), Layout::MaskFolders);
        assert_eq!(Layout::RotatedBoxIndex.to_string(), "rotated_box_index");
        assert!("folders".parse::<Layout>().is_err());
    }
}
