//! PNG and PNM reading and writing for [`Image`].

use std::path::Path;

use image::{ColorType, DynamicImage, GrayImage, RgbImage};
use patchnet_core::Image;

use crate::error::{Error, Result};

/// File extensions recognised as images.
pub const EXTENSIONS: [&str; 4] = ["png", "pgm", "ppm", "pnm"];

pub fn is_image_path(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Grayscale files load with one channel, everything else as RGB. Alpha
/// and 16-bit depth are dropped.
pub fn load_image(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.into(),
        source,
    })?;
    Ok(from_dynamic(img)?)
}

pub fn from_dynamic(img: DynamicImage) -> patchnet_core::Result<Image> {
    let gray = matches!(
        img.color(),
        ColorType::L8 | ColorType::La8 | ColorType::L16 | ColorType::La16
    );
    if gray {
        let g = img.to_luma8();
        Image::new(g.height() as usize, g.width() as usize, 1, g.into_raw())
    } else {
        let c = img.to_rgb8();
        Image::new(c.height() as usize, c.width() as usize, 3, c.into_raw())
    }
}

/// Writes by extension (png, pgm, ppm).
pub fn save_image(image: &Image, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(crate::error::io_err(dir))?;
    }
    let (h, w) = (image.height() as u32, image.width() as u32);
    let data = image.data().to_vec();
    let result = if image.channels() == 1 {
        GrayImage::from_raw(w, h, data)
            .expect("length checked by Image")
            .save(path)
    } else {
        RgbImage::from_raw(w, h, data)
            .expect("length checked by Image")
            .save(path)
    };
    result.map_err(|source| Error::Image {
        path: path.into(),
        source,
    })
}
