//! Loader for external image corpora laid out as one directory per class of
//! grayscale raster files (PNG or PGM/PNM).

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;

use super::glyph::GLYPH_SIZE;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Loads a class-per-folder image corpus: every subdirectory of `dir` is one
/// class, every raster file inside one instance.
///
/// Images are converted to grayscale, resized onto a 32x32 canvas with
/// aspect-preserving padding (background zero), and scaled to `[0, 1]`.
/// Unreadable files are skipped with a warning on stderr; a class directory
/// with no readable image is an error. Classes and instances are ordered
/// lexicographically by path, so the result is deterministic.
pub fn load_image_dataset(dir: impl AsRef<Path>) -> Result<Vec<(String, Vec<Tensor>)>> {
    let dir = dir.as_ref();
    let mut class_dirs: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(Error::invalid(format!(
            "{} contains no class subdirectories",
            dir.display()
        )));
    }

    let mut classes = Vec::with_capacity(class_dirs.len());
    for class_dir in class_dirs {
        let name = class_dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let mut files: Vec<PathBuf> = fs::read_dir(&class_dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_file())
            .collect();
        files.sort();

        let mut instances = Vec::new();
        for file in files {
            match load_one(&file) {
                Ok(tensor) => instances.push(tensor),
                Err(e) => eprintln!("warning: skipping {}: {e}", file.display()),
            }
        }
        if instances.is_empty() {
            return Err(Error::invalid(format!(
                "class directory {} has no readable images",
                class_dir.display()
            )));
        }
        classes.push((name, instances));
    }
    Ok(classes)
}

fn load_one(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| Error::Format(format!("not a readable image: {e}")))?
        .to_luma8();
    let (w, h) = (img.width(), img.height());
    let size = GLYPH_SIZE as u32;

    // Fit the longer side to 32 px, keep aspect, pad the rest with zeros.
    let (nw, nh) = if w >= h {
        (size, ((h as f64 / w as f64) * size as f64).round().max(1.0) as u32)
    } else {
        (((w as f64 / h as f64) * size as f64).round().max(1.0) as u32, size)
    };
    let resized = image::imageops::resize(&img, nw, nh, FilterType::Triangle);

    let (x0, y0) = (((size - nw) / 2) as usize, ((size - nh) / 2) as usize);
    let mut values = vec![0.0f64; GLYPH_SIZE * GLYPH_SIZE];
    for y in 0..nh as usize {
        for x in 0..nw as usize {
            values[(y0 + y) * GLYPH_SIZE + x0 + x] =
                resized.get_pixel(x as u32, y as u32)[0] as f64 / 255.0;
        }
    }
    Tensor::new(vec![1, GLYPH_SIZE, GLYPH_SIZE], values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{GrayImage, Luma};

    fn write_png(path: &Path, w: u32, h: u32, value: u8) {
        let img = GrayImage::from_pixel(w, h, Luma([value]));
        img.save(path).unwrap();
    }

    #[test]
    fn loads_classes_and_instances_in_order() {
        let tmp = tempfile::tempdir().unwrap();
        for class in ["alpha", "beta"] {
            let dir = tmp.path().join(class);
            fs::create_dir(&dir).unwrap();
            for i in 0..3 {
                write_png(&dir.join(format!("im{i}.png")), 32, 32, 128 + i as u8);
            }
        }
        let classes = load_image_dataset(tmp.path()).unwrap();
        assert_eq!(classes.len(), 2);
        assert_eq!(classes[0].0, "alpha");
        assert_eq!(classes[1].0, "beta");
        assert!(classes.iter().all(|(_, v)| v.len() == 3));
        assert_eq!(classes[0].1[0].shape(), &[1, 32, 32]);
    }

    #[test]
    fn non_square_images_are_aspect_padded() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("wide");
        fs::create_dir(&dir).unwrap();
        write_png(&dir.join("a.png"), 64, 16, 255);
        let classes = load_image_dataset(tmp.path()).unwrap();
        let t = &classes[0].1[0];
        // 64x16 fits as 32x8 centred: rows 12..20 are bright, the pad is zero.
        assert_eq!(t.values()[0], 0.0);
        let bright_row = 14 * GLYPH_SIZE;
        assert!(t.values()[bright_row + 16] > 0.9);
        let top_pad: f64 = t.values()[..8 * GLYPH_SIZE].iter().sum();
        assert_eq!(top_pad, 0.0);
    }

    #[test]
    fn unreadable_files_are_skipped_and_empty_classes_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let good = tmp.path().join("good");
        fs::create_dir(&good).unwrap();
        write_png(&good.join("ok.png"), 20, 20, 200);
        fs::write(good.join("junk.png"), b"not an image").unwrap();
        let classes = load_image_dataset(tmp.path()).unwrap();
        assert_eq!(classes[0].1.len(), 1);

        let bad = tmp.path().join("bad");
        fs::create_dir(&bad).unwrap();
        fs::write(bad.join("junk.png"), b"not an image").unwrap();
        assert!(load_image_dataset(tmp.path()).is_err());
    }
}
