//! Directory-backed datasets.
//!
//! ```text
//! <root>/<split>/0/<image files>      class 0
//! <root>/<split>/1/<image files>      class 1
//! <root>/<split>/masks/<same name>    optional feature masks
//! ```
//!
//! A mask matches an image when the file stems agree, so `lesion.png` may
//! be paired with `masks/lesion.pgm`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use patchnet_core::imaging::{resize, Preprocess};
use patchnet_core::metrics::{BinaryMask, MaskedImage};
use patchnet_core::{Image, Sample};

use crate::error::{io_err, Error, Result};
use crate::image_io::{is_image_path, load_image, save_image};

pub const CLASS_DIRS: [&str; 2] = ["0", "1"];
pub const MASK_DIR: &str = "masks";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    /// `<class>/<file name>`, unique within a split.
    pub id: String,
    pub label: u8,
    pub image: PathBuf,
    pub mask: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct Split {
    pub dir: PathBuf,
    /// Sorted by class, then file name.
    pub entries: Vec<Entry>,
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if path.is_file() && is_image_path(&path) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

impl Split {
    /// Lists `<root>/<name>`. Fails when the directory holds no images.
    pub fn scan(root: &Path, name: &str) -> Result<Self> {
        let dir = root.join(name);
        if !dir.is_dir() {
            return Err(Error::Dataset(format!("{} is not a directory", dir.display())));
        }
        let mut masks = BTreeMap::new();
        for path in image_files(&dir.join(MASK_DIR))? {
            if let Some(prev) = masks.insert(stem(&path), path.clone()) {
                return Err(Error::Dataset(format!(
                    "masks {} and {} share a name",
                    prev.display(),
                    path.display()
                )));
            }
        }
        let mut entries = Vec::new();
        for (label, class) in CLASS_DIRS.iter().enumerate() {
            for path in image_files(&dir.join(class))? {
                let name = path.file_name().expect("file").to_string_lossy().into_owned();
                entries.push(Entry {
                    id: format!("{class}/{name}"),
                    label: label as u8,
                    mask: masks.get(&stem(&path)).cloned(),
                    image: path,
                });
            }
        }
        if entries.is_empty() {
            return Err(Error::Dataset(format!("no images under {}/{{0,1}}", dir.display())));
        }
        Ok(Self { dir, entries })
    }

    pub fn class_counts(&self) -> [usize; 2] {
        let ones = self.entries.iter().filter(|e| e.label == 1).count();
        [self.entries.len() - ones, ones]
    }

    pub fn missing_masks(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|e| e.mask.is_none())
            .map(|e| e.id.clone())
            .collect()
    }

    /// Tab-separated `image label mask` lines, `-` for no mask.
    pub fn index(&self) -> String {
        let mut out = String::from("# image\tlabel\tmask\n");
        for e in &self.entries {
            let mask = e.mask.as_ref().map_or("-".into(), |m| m.display().to_string());
            let _ = writeln!(out, "{}\t{}\t{}", e.image.display(), e.label, mask);
        }
        out
    }

    pub fn write_index(&self, path: &Path) -> Result<()> {
        fs::write(path, self.index()).map_err(io_err(path))
    }

    pub fn load_samples(&self, pre: &Preprocess) -> Result<Vec<Sample>> {
        self.entries
            .iter()
            .map(|e| Ok(Sample::new(pre.apply(&load_image(&e.image)?)?, e.label)?))
            .collect()
    }

    /// Every entry with its mask. A mask whose size differs from the
    /// preprocessed image is resized bilinearly and re-binarized at 128.
    pub fn load_masked(&self, pre: &Preprocess) -> Result<Vec<MaskedImage>> {
        self.entries
            .iter()
            .map(|e| {
                let image = pre.apply(&load_image(&e.image)?)?;
                let mask = match &e.mask {
                    Some(path) => Some(load_mask(path, image.height(), image.width())?),
                    None => None,
                };
                Ok(MaskedImage {
                    id: e.id.clone(),
                    image,
                    mask,
                })
            })
            .collect()
    }
}

pub fn load_mask(path: &Path, height: usize, width: usize) -> Result<BinaryMask> {
    let mut img = load_image(path)?;
    if img.channels() != 1 {
        return Err(Error::Dataset(format!("mask {} is not single-channel", path.display())));
    }
    if (img.height(), img.width()) != (height, width) {
        let r = resize(&img, height, width)?;
        let bits = r.data().iter().map(|&v| if v >= 128 { 255 } else { 0 }).collect();
        img = Image::new(height, width, 1, bits)?;
    }
    Ok(BinaryMask::from_image(&img)?)
}

/// Writes samples as `<root>/<split>/<label>/<prefix><n>.png`, with masks
/// under `masks/` when given.
pub fn write_split(root: &Path, split: &str, samples: &[Sample], masks: Option<&[Image]>) -> Result<()> {
    let dir = root.join(split);
    let mut counters = [0usize; 2];
    for (i, s) in samples.iter().enumerate() {
        let n = counters[s.label as usize];
        counters[s.label as usize] += 1;
        let name = format!("c{}_{n:04}.png", s.label);
        save_image(&s.image, &dir.join(CLASS_DIRS[s.label as usize]).join(&name))?;
        if let Some(masks) = masks {
            save_image(&masks[i], &dir.join(MASK_DIR).join(&name))?;
        }
    }
    Ok(())
}
