//! The global component: cutting an image into patches, averaging the
//! subnet's patch probabilities into one image-level probability, and the
//! stride-1 global heatmap.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::imaging::{round_half_up, Image};
use crate::nn::{subnet_forward, PatchDims, SubnetParams, FILTERS};
use crate::tensor::{Real, Tensor};

/// How the last patch on an axis is placed when the stride does not tile it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Coverage {
    /// Trailing pixels not reached by a full stride are skipped.
    DropRemainder,
    /// One extra patch is anchored flush with the far edge.
    #[default]
    ClampToEdge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchConfig {
    pub height: usize,
    pub width: usize,
    pub stride_y: usize,
    pub stride_x: usize,
    pub coverage: Coverage,
}

impl PatchConfig {
    /// Square patches with equal strides and edge clamping.
    pub fn square(size: usize, stride: usize) -> Self {
        Self {
            height: size,
            width: size,
            stride_y: stride,
            stride_x: stride,
            coverage: Coverage::ClampToEdge,
        }
    }

    /// Non-overlapping tiling: stride equals patch size.
    pub fn tiled(size: usize) -> Self {
        Self::square(size, size)
    }

    pub fn with_coverage(mut self, coverage: Coverage) -> Self {
        self.coverage = coverage;
        self
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(invalid("patch size", "must be at least 1"));
        }
        if self.stride_y == 0 || self.stride_x == 0 {
            return Err(invalid("stride", "must be at least 1"));
        }
        if self.height > height || self.width > width {
            return Err(Error::PatchTooLarge {
                patch: (self.height, self.width),
                image: (height, width),
            });
        }
        Ok(())
    }
}

/// Anchors along one axis of length `len`.
pub fn axis_anchors(len: usize, patch: usize, stride: usize, coverage: Coverage) -> Vec<usize> {
    if patch == 0 || stride == 0 || patch > len {
        return Vec::new();
    }
    let mut out: Vec<usize> = (0..=len - patch).step_by(stride).collect();
    if coverage == Coverage::ClampToEdge {
        let last = *out.last().expect("anchor 0 always fits");
        if last + patch < len {
            out.push(len - patch);
        }
    }
    out
}

/// A batch of patches and the top-left anchor each was cut from.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid<T> {
    /// `[l, c, m', n']`, pixel values scaled to `[0, 1]`.
    pub patches: Tensor<T>,
    pub positions: Vec<(usize, usize)>,
}

impl<T> PatchGrid<T> {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Scales an 8-bit value into `[0, 1]`.
#[inline]
pub fn normalize_pixel<T: Real>(v: u8) -> T {
    T::of(v as f64 / 255.0)
}

/// Writes the `[c, h, w]` crop anchored at `(top, left)` into `out`. The
/// anchor may lie partly outside the image; those pixels read as zero.
fn cut_into<T: Real>(image: &Image, top: isize, left: isize, h: usize, w: usize, out: &mut [T]) {
    let c = image.channels();
    for ch in 0..c {
        for y in 0..h {
            let sy = top + y as isize;
            let row = &mut out[(ch * h + y) * w..][..w];
            if sy < 0 || sy >= image.height() as isize {
                row.iter_mut().for_each(|v| *v = T::zero());
                continue;
            }
            for (x, slot) in row.iter_mut().enumerate() {
                let sx = left + x as isize;
                *slot = if sx < 0 || sx >= image.width() as isize {
                    T::zero()
                } else {
                    normalize_pixel(image.get(sy as usize, sx as usize, ch))
                };
            }
        }
    }
}

pub fn chunk_patches<T: Real>(image: &Image, cfg: &PatchConfig) -> Result<PatchGrid<T>> {
    cfg.validate(image.height(), image.width())?;
    let rows = axis_anchors(image.height(), cfg.height, cfg.stride_y, cfg.coverage);
    let cols = axis_anchors(image.width(), cfg.width, cfg.stride_x, cfg.coverage);
    let positions: Vec<(usize, usize)> = rows.iter().flat_map(|&r| cols.iter().map(move |&c| (r, c))).collect();
    let c = image.channels();
    let len = c * cfg.height * cfg.width;
    let mut data = vec![T::zero(); positions.len() * len];
    for (slot, &(r, col)) in data.chunks_exact_mut(len).zip(&positions) {
        cut_into(image, r as isize, col as isize, cfg.height, cfg.width, slot);
    }
    let patches = Tensor::new(vec![positions.len(), c, cfg.height, cfg.width], data)?;
    Ok(PatchGrid { patches, positions })
}

/// Mean of patch probabilities, summed in `f64` in ascending order so the
/// result does not depend on patch order.
pub fn mean_probability<T: Real>(probs: &[T]) -> T {
    let mut sorted: Vec<f64> = probs.iter().map(|p| p.f64()).collect();
    sorted.sort_by(f64::total_cmp);
    T::of(sorted.iter().sum::<f64>() / sorted.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalPrediction<T> {
    pub p_global: T,
    pub patch_probs: Tensor<T>,
}

fn check_dims(params_dims: PatchDims, cfg: &PatchConfig, image: &Image) -> Result<()> {
    if params_dims.height != cfg.height || params_dims.width != cfg.width {
        return Err(Error::ShapeMismatch {
            left: vec![params_dims.height, params_dims.width],
            right: vec![cfg.height, cfg.width],
        });
    }
    if params_dims.channels != image.channels() {
        return Err(Error::ChannelMismatch {
            expected: params_dims.channels,
            found: image.channels(),
        });
    }
    Ok(())
}

/// Image-level class-1 probability: the mean subnet output over the patch grid.
pub fn global_forward<T: Real>(
    params: &SubnetParams<T>,
    image: &Image,
    cfg: &PatchConfig,
) -> Result<GlobalPrediction<T>> {
    check_dims(params.dims, cfg, image)?;
    let grid = chunk_patches(image, cfg)?;
    let patch_probs = subnet_forward(params, &grid.patches)?;
    Ok(GlobalPrediction {
        p_global: mean_probability(patch_probs.data()),
        patch_probs,
    })
}

/// Per-pixel class-1 probabilities, same dims as the source image.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap<T> {
    /// `[m, n]`
    pub values: Tensor<T>,
}

impl<T: Real> Heatmap<T> {
    pub fn new(values: Tensor<T>) -> Result<Self> {
        if values.shape().len() != 2 {
            return Err(invalid(
                "heatmap",
                alloc::format!("expected rank 2, got {:?}", values.shape()),
            ));
        }
        if let Some(v) = values.data().iter().find(|v| !(**v >= T::zero() && **v <= T::one())) {
            return Err(Error::OutOfRange {
                what: "heatmap",
                value: v.f64(),
            });
        }
        Ok(Self { values })
    }

    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn get(&self, row: usize, col: usize) -> T {
        self.values.data()[row * self.width() + col]
    }

    pub fn data(&self) -> &[T] {
        self.values.data()
    }
}

/// Top-left anchor of the patch centered on `(row, col)`; even sizes put the
/// center above and left of the geometric middle.
#[inline]
pub fn centered_anchor(dims: PatchDims, row: usize, col: usize) -> (isize, isize) {
    (
        row as isize - ((dims.height - 1) / 2) as isize,
        col as isize - ((dims.width - 1) / 2) as isize,
    )
}

/// The `[1, c, m', n']` zero-padded patch centered on `(row, col)`.
pub fn centered_patch<T: Real>(image: &Image, dims: PatchDims, row: usize, col: usize) -> Result<Tensor<T>> {
    if dims.channels != image.channels() {
        return Err(Error::ChannelMismatch {
            expected: dims.channels,
            found: image.channels(),
        });
    }
    let (top, left) = centered_anchor(dims, row, col);
    let mut data = vec![T::zero(); dims.patch_len()];
    cut_into(image, top, left, dims.height, dims.width, &mut data);
    Tensor::new(vec![1, dims.channels, dims.height, dims.width], data)
}

/// Im2col working-set budget (elements) per heatmap batch.
const HEATMAP_BUDGET: usize = 1 << 22;

fn heatmap_batch(dims: PatchDims) -> usize {
    (HEATMAP_BUDGET / (dims.area() * FILTERS * 9)).max(1)
}

fn heatmap_span<T: Real>(params: &SubnetParams<T>, image: &Image, start: usize, out: &mut [T]) -> Result<()> {
    let dims = params.dims;
    let len = dims.patch_len();
    let mut data = vec![T::zero(); out.len() * len];
    for (k, slot) in data.chunks_exact_mut(len).enumerate() {
        let pixel = start + k;
        let (top, left) = centered_anchor(dims, pixel / image.width(), pixel % image.width());
        cut_into(image, top, left, dims.height, dims.width, slot);
    }
    let batch = Tensor::new(vec![out.len(), dims.channels, dims.height, dims.width], data)?;
    out.copy_from_slice(subnet_forward(params, &batch)?.data());
    Ok(())
}

/// Global heatmap: the subnet output on the zero-padded patch centered at
/// every pixel (stride 1). Pixels are evaluated in batches; each value is
/// identical to evaluating its patch alone.
pub fn extract_heatmap<T: Real>(params: &SubnetParams<T>, image: &Image) -> Result<Heatmap<T>> {
    if params.dims.channels != image.channels() {
        return Err(Error::ChannelMismatch {
            expected: params.dims.channels,
            found: image.channels(),
        });
    }
    let total = image.height() * image.width();
    let mut values = vec![T::zero(); total];
    let chunk = heatmap_batch(params.dims);

    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        values
            .par_chunks_mut(chunk)
            .enumerate()
            .try_for_each(|(i, out)| heatmap_span(params, image, i * chunk, out))?;
    }
    #[cfg(not(feature = "parallel"))]
    for (i, out) in values.chunks_mut(chunk).enumerate() {
        heatmap_span(params, image, i * chunk, out)?;
    }

    Heatmap::new(Tensor::new(vec![image.height(), image.width()], values)?)
}

/// Grayscale rendering: `round(255 * value)`, white for class 1.
pub fn heatmap_to_image<T: Real>(heatmap: &Heatmap<T>) -> Result<Image> {
    let data = heatmap
        .data()
        .iter()
        .map(|&v| {
            let x = v.f64();
            if (0.0..=1.0).contains(&x) {
                Ok(round_half_up(255.0 * x) as u8)
            } else {
                Err(Error::OutOfRange {
                    what: "heatmap",
                    value: x,
                })
            }
        })
        .collect::<Result<Vec<u8>>>()?;
    Image::new(heatmap.height(), heatmap.width(), 1, data)
}
