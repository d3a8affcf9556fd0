//! 8-bit rasters and the pixel-level transforms applied before training:
//! gamma correction, shades-of-gray color constancy, bilinear resizing and
//! the rotation/zoom/flip augmentations.

use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use crate::error::{invalid, Error, Result};
use crate::tensor::RngState;

/// `m x n x c` raster with values in `0..=255`, row-major, channels interleaved.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<u8>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(invalid(
                "image dims",
                alloc::format!("{height}x{width} has a zero side"),
            ));
        }
        if channels != 1 && channels != 3 {
            return Err(invalid("channels", alloc::format!("expected 1 or 3, got {channels}")));
        }
        if data.len() != height * width * channels {
            return Err(Error::LengthMismatch {
                left: height * width * channels,
                right: data.len(),
            });
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: u8) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> u8 {
        self.data[(row * self.width + col) * self.channels + ch]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, value: u8) {
        self.data[(row * self.width + col) * self.channels + ch] = value;
    }

    fn with_data(&self, data: Vec<u8>) -> Self {
        Self { data, ..self.clone() }
    }
}

#[inline]
pub(crate) fn round_half_up(x: f64) -> f64 {
    Float::floor(x + 0.5)
}

#[inline]
fn to_pixel(x: f64) -> u8 {
    round_half_up(x).clamp(0.0, 255.0) as u8
}

/// Which way the gamma exponent is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GammaDirection {
    /// `out = in^(1/gamma)`: brightens mid-tones.
    #[default]
    Decode,
    /// `out = in^gamma`
    Encode,
}

/// `out = round(255 * (in/255)^(1/gamma))` per channel.
pub fn gamma_correct(image: &Image, gamma: f64) -> Result<Image> {
    gamma_correct_with(image, gamma, GammaDirection::Decode)
}

pub fn gamma_correct_with(image: &Image, gamma: f64, direction: GammaDirection) -> Result<Image> {
    if !gamma.is_finite() || gamma <= 0.0 {
        return Err(invalid("gamma", alloc::format!("must be positive, got {gamma}")));
    }
    let exponent = match direction {
        GammaDirection::Decode => 1.0 / gamma,
        GammaDirection::Encode => gamma,
    };
    let mut lut = [0u8; 256];
    for (v, slot) in lut.iter_mut().enumerate() {
        *slot = to_pixel(255.0 * Float::powf(v as f64 / 255.0, exponent));
    }
    Ok(image.with_data(image.data.iter().map(|&v| lut[v as usize]).collect()))
}

/// Shades-of-gray white balance with Minkowski norm `p` (`p = 1` is gray world).
///
/// Channel illuminants are `e = mean(x^p)^(1/p)`; each channel is scaled by
/// `mean(e) / e_ch`. Channels that are entirely zero are left alone.
pub fn color_constancy(image: &Image, minkowski_p: f64) -> Result<Image> {
    if image.channels != 3 {
        return Err(Error::ChannelMismatch {
            expected: 3,
            found: image.channels,
        });
    }
    if !minkowski_p.is_finite() || minkowski_p < 1.0 {
        return Err(invalid(
            "minkowski p",
            alloc::format!("must be finite and >= 1, got {minkowski_p}"),
        ));
    }
    let pixels = (image.height * image.width) as f64;
    let mut illum = [0.0f64; 3];
    for (ch, e) in illum.iter_mut().enumerate() {
        let s: f64 = image
            .data
            .iter()
            .skip(ch)
            .step_by(3)
            .map(|&v| Float::powf(v as f64 / 255.0, minkowski_p))
            .sum();
        *e = Float::powf(s / pixels, 1.0 / minkowski_p);
    }
    let gray = illum.iter().sum::<f64>() / 3.0;
    let gains = illum.map(|e| if e > 0.0 { gray / e } else { 1.0 });
    let data = image
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| to_pixel(v as f64 * gains[i % 3]))
        .collect();
    Ok(image.with_data(data))
}

/// Bilinear resize with half-pixel sample centers and edge clamping.
pub fn resize(image: &Image, new_height: usize, new_width: usize) -> Result<Image> {
    if new_height == 0 || new_width == 0 {
        return Err(invalid("resize target", alloc::format!("{new_height}x{new_width}")));
    }
    Ok(resample(
        image,
        0.0,
        0.0,
        image.height as f64,
        image.width as f64,
        new_height,
        new_width,
    ))
}

/// Bilinear sampling of the window `[top, top+h) x [left, left+w)` of `image`
/// onto an `out_h x out_w` grid. Samples are clamped to the window, so
/// pixels outside it never contribute.
fn resample(image: &Image, top: f64, left: f64, h: f64, w: f64, out_h: usize, out_w: usize) -> Image {
    let c = image.channels;
    let axis = |out: usize, len: usize, origin: f64, extent: f64| -> Vec<(usize, usize, f64)> {
        (0..out)
            .map(|i| {
                let src = origin + (i as f64 + 0.5) * extent / out as f64 - 0.5;
                let last = origin + extent - 1.0;
                let src = src.clamp(origin, last);
                let lo = Float::floor(src) as usize;
                let hi = (lo + 1).min(last as usize).min(len - 1);
                (lo, hi, src - lo as f64)
            })
            .collect()
    };
    let rows = axis(out_h, image.height, top, h);
    let cols = axis(out_w, image.width, left, w);
    let mut data = Vec::with_capacity(out_h * out_w * c);
    for &(y0, y1, fy) in &rows {
        for &(x0, x1, fx) in &cols {
            for ch in 0..c {
                let p = |y, x| image.get(y, x, ch) as f64;
                let top_row = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bottom_row = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                data.push(to_pixel(top_row * (1.0 - fy) + bottom_row * fy));
            }
        }
    }
    Image {
        height: out_h,
        width: out_w,
        channels: c,
        data,
    }
}

/// Geometric augmentation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AugmentOp {
    Rotate180,
    /// Zoom-in by a factor in `(1.0, 1.2]`.
    Zoom(f64),
    HFlip,
    VFlip,
}

/// Where a zoom crop is taken from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ZoomAnchor {
    #[default]
    Center,
    Random,
}

pub const MAX_ZOOM: f64 = 1.2;

/// Applies `op` with a centered zoom crop.
pub fn augment(image: &Image, op: AugmentOp) -> Result<Image> {
    match op {
        AugmentOp::Rotate180 => Ok(image.with_data(reverse_pixels(image, true, true))),
        AugmentOp::HFlip => Ok(image.with_data(reverse_pixels(image, false, true))),
        AugmentOp::VFlip => Ok(image.with_data(reverse_pixels(image, true, false))),
        AugmentOp::Zoom(scale) => zoom(image, scale, ZoomAnchor::Center, None),
    }
}

/// Crops `1/scale` of each side (rounded, at least one pixel) and resizes the
/// crop back to the original dims.
pub fn zoom(image: &Image, scale: f64, anchor: ZoomAnchor, rng: Option<&mut RngState>) -> Result<Image> {
    if !(scale > 1.0 && scale <= MAX_ZOOM) {
        return Err(invalid(
            "zoom scale",
            alloc::format!("{scale} outside (1.0, {MAX_ZOOM}]"),
        ));
    }
    let crop_h = (round_half_up(image.height as f64 / scale) as usize).clamp(1, image.height);
    let crop_w = (round_half_up(image.width as f64 / scale) as usize).clamp(1, image.width);
    let (top, left) = match (anchor, rng) {
        (ZoomAnchor::Random, Some(rng)) => (
            rng.below(image.height - crop_h + 1),
            rng.below(image.width - crop_w + 1),
        ),
        (ZoomAnchor::Random, None) => return Err(invalid("zoom anchor", "random anchor needs an rng")),
        (ZoomAnchor::Center, _) => ((image.height - crop_h) / 2, (image.width - crop_w) / 2),
    };
    Ok(resample(
        image,
        top as f64,
        left as f64,
        crop_h as f64,
        crop_w as f64,
        image.height,
        image.width,
    ))
}

fn reverse_pixels(image: &Image, rows: bool, cols: bool) -> Vec<u8> {
    let (h, w, c) = (image.height, image.width, image.channels);
    let mut out = Vec::with_capacity(image.data.len());
    for y in 0..h {
        let sy = if rows { h - 1 - y } else { y };
        for x in 0..w {
            let sx = if cols { w - 1 - x } else { x };
            out.extend_from_slice(&image.data[(sy * w + sx) * c..][..c]);
        }
    }
    out
}

/// Which random augmentations the training loop draws per image.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AugmentPolicy {
    pub rotate180: bool,
    /// Upper zoom factor; `None` disables zoom.
    pub zoom_max: Option<f64>,
    pub zoom_anchor: ZoomAnchor,
    pub hflip: bool,
    pub vflip: bool,
}

impl AugmentPolicy {
    pub fn is_identity(&self) -> bool {
        !self.rotate180 && self.zoom_max.is_none() && !self.hflip && !self.vflip
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(z) = self.zoom_max {
            if !(z > 1.0 && z <= MAX_ZOOM) {
                return Err(invalid("zoom max", alloc::format!("{z} outside (1.0, {MAX_ZOOM}]")));
            }
        }
        Ok(())
    }

    /// Each enabled transform fires with probability 1/2; zoom factors are
    /// uniform in `(1, zoom_max]`.
    pub fn sample(&self, image: &Image, rng: &mut RngState) -> Result<Image> {
        let mut out = image.clone();
        if self.rotate180 && rng.uniform() < 0.5 {
            out = augment(&out, AugmentOp::Rotate180)?;
        }
        if self.hflip && rng.uniform() < 0.5 {
            out = augment(&out, AugmentOp::HFlip)?;
        }
        if self.vflip && rng.uniform() < 0.5 {
            out = augment(&out, AugmentOp::VFlip)?;
        }
        if let Some(max) = self.zoom_max {
            if rng.uniform() < 0.5 {
                let scale = max - (max - 1.0) * rng.uniform();
                out = zoom(&out, scale, self.zoom_anchor, Some(rng))?;
            }
        }
        Ok(out)
    }

    /// Deterministic expansion: the original plus one copy per enabled
    /// transform (zoom at its maximum factor).
    pub fn expand(&self, image: &Image) -> Result<Vec<Image>> {
        let mut out = vec![image.clone()];
        if self.rotate180 {
            out.push(augment(image, AugmentOp::Rotate180)?);
        }
        if self.hflip {
            out.push(augment(image, AugmentOp::HFlip)?);
        }
        if self.vflip {
            out.push(augment(image, AugmentOp::VFlip)?);
        }
        if let Some(max) = self.zoom_max {
            out.push(zoom(image, max, ZoomAnchor::Center, None)?);
        }
        Ok(out)
    }
}

/// Per-image normalization applied before patching: resize, then gamma,
/// then color constancy (three-channel images only).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Preprocess {
    pub resize: Option<(usize, usize)>,
    pub gamma: Option<f64>,
    pub gamma_direction: GammaDirection,
    pub color_constancy: Option<f64>,
}

impl Preprocess {
    pub fn apply(&self, image: &Image) -> Result<Image> {
        let mut out = match self.resize {
            Some((h, w)) => resize(image, h, w)?,
            None => image.clone(),
        };
        if let Some(g) = self.gamma {
            out = gamma_correct_with(&out, g, self.gamma_direction)?;
        }
        if let Some(p) = self.color_constancy {
            if out.channels == 3 {
                out = color_constancy(&out, p)?;
            }
        }
        Ok(out)
    }
}
