//! Agreement between heatmaps and binary feature masks: exact match,
//! recall and per-image AUROC, averaged over a dataset.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::imaging::Image;
use crate::nn::SubnetParams;
use crate::patchcore::{extract_heatmap, Heatmap};
use crate::tensor::Real;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Pixel-wise feature mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width || bits.is_empty() {
            return Err(Error::LengthMismatch {
                left: height * width,
                right: bits.len(),
            });
        }
        Ok(Self { height, width, bits })
    }

    /// Single-channel image; any nonzero pixel is positive.
    pub fn from_image(image: &Image) -> Result<Self> {
        if image.channels() != 1 {
            return Err(Error::ChannelMismatch {
                expected: 1,
                found: image.channels(),
            });
        }
        Self::new(
            image.height(),
            image.width(),
            image.data().iter().map(|&v| v != 0).collect(),
        )
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn positives(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn negatives(&self) -> usize {
        self.bits.len() - self.positives()
    }
}

fn check_dims<T: Real>(h: &Heatmap<T>, m: &BinaryMask) -> Result<()> {
    if h.height() != m.height || h.width() != m.width {
        return Err(Error::ShapeMismatch {
            left: alloc::vec![h.height(), h.width()],
            right: alloc::vec![m.height, m.width],
        });
    }
    Ok(())
}

/// Fraction of pixels where `heatmap >= 0.5` agrees with the mask.
pub fn exact_match<T: Real>(heatmap: &Heatmap<T>, mask: &BinaryMask) -> Result<f64> {
    exact_match_at(heatmap, mask, DEFAULT_THRESHOLD)
}

pub fn exact_match_at<T: Real>(heatmap: &Heatmap<T>, mask: &BinaryMask, threshold: f64) -> Result<f64> {
    check_dims(heatmap, mask)?;
    let hits = heatmap
        .data()
        .iter()
        .zip(&mask.bits)
        .filter(|(v, &m)| (v.f64() >= threshold) == m)
        .count();
    Ok(hits as f64 / mask.bits.len() as f64)
}

/// Fraction of positive mask pixels with `heatmap >= 0.5`.
pub fn recall<T: Real>(heatmap: &Heatmap<T>, mask: &BinaryMask) -> Result<f64> {
    recall_at(heatmap, mask, DEFAULT_THRESHOLD)
}

pub fn recall_at<T: Real>(heatmap: &Heatmap<T>, mask: &BinaryMask, threshold: f64) -> Result<f64> {
    check_dims(heatmap, mask)?;
    let positives = mask.positives();
    if positives == 0 {
        return Err(Error::RecallUndefined);
    }
    let captured = heatmap
        .data()
        .iter()
        .zip(&mask.bits)
        .filter(|(v, &m)| m && v.f64() >= threshold)
        .count();
    Ok(captured as f64 / positives as f64)
}

/// Probability that a random positive pixel outscores a random negative
/// pixel, ties counting one half.
pub fn auroc<T: Real>(heatmap: &Heatmap<T>, mask: &BinaryMask) -> Result<f64> {
    check_dims(heatmap, mask)?;
    let scores: Vec<f64> = heatmap.data().iter().map(|v| v.f64()).collect();
    auroc_scores(&scores, &mask.bits)
}

/// Mann–Whitney AUROC by sorting. The statistic is accumulated as the
/// integer `2U` (wins counted twice, ties once), so the result is exactly
/// `(2 * wins + ties) / (2 * P * N)`.
pub fn auroc_scores(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: scores.len(),
            right: labels.len(),
        });
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(invalid("score", alloc::format!("{s}")));
    }
    let pos = labels.iter().filter(|&&l| l).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::AurocUndefined);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[i].total_cmp(&scores[j]));
    let mut twice_u: u128 = 0;
    let mut neg_below: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut gp, mut gn) = (0u64, 0u64);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                gp += 1;
            } else {
                gn += 1;
            }
            j += 1;
        }
        twice_u += gp as u128 * (2 * neg_below + gn) as u128;
        neg_below += gn;
        i = j;
    }
    Ok(twice_u as f64 / (2 * pos as u128 * neg as u128) as f64)
}

/// Statistics for one image. `recall` is absent when the mask has no
/// positives, `auroc` when it is single-class.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageOverlap {
    pub id: String,
    pub exact_match: f64,
    pub recall: Option<f64>,
    pub auroc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskOverlapReport {
    pub threshold: f64,
    pub images: Vec<ImageOverlap>,
    pub average_exact_match: f64,
    /// Mean over images whose mask has a positive pixel.
    pub average_recall: Option<f64>,
    /// Mean over images whose mask has both classes.
    pub average_auroc: Option<f64>,
    pub recall_excluded: usize,
    pub auroc_excluded: usize,
}

pub fn image_overlap<T: Real>(
    id: &str,
    heatmap: &Heatmap<T>,
    mask: &BinaryMask,
    threshold: f64,
) -> Result<ImageOverlap> {
    let exact = exact_match_at(heatmap, mask, threshold)?;
    let recall = match recall_at(heatmap, mask, threshold) {
        Ok(r) => Some(r),
        Err(Error::RecallUndefined) => None,
        Err(e) => return Err(e),
    };
    let auroc = match auroc(heatmap, mask) {
        Ok(a) => Some(a),
        Err(Error::AurocUndefined) => None,
        Err(e) => return Err(e),
    };
    Ok(ImageOverlap {
        id: id.into(),
        exact_match: exact,
        recall,
        auroc,
    })
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Averages per-image rows with the exclusion rules above.
pub fn summarize(images: Vec<ImageOverlap>, threshold: f64) -> Result<MaskOverlapReport> {
    if images.is_empty() {
        return Err(Error::Empty("mask-bearing image set"));
    }
    let average_exact_match = mean(images.iter().map(|r| r.exact_match)).expect("nonempty");
    Ok(MaskOverlapReport {
        threshold,
        average_recall: mean(images.iter().filter_map(|r| r.recall)),
        average_auroc: mean(images.iter().filter_map(|r| r.auroc)),
        recall_excluded: images.iter().filter(|r| r.recall.is_none()).count(),
        auroc_excluded: images.iter().filter(|r| r.auroc.is_none()).count(),
        average_exact_match,
        images,
    })
}

/// Report from precomputed heatmaps.
pub fn overlap_report<T: Real>(
    items: &[(String, Heatmap<T>, BinaryMask)],
    threshold: f64,
) -> Result<MaskOverlapReport> {
    let rows = items
        .iter()
        .map(|(id, h, m)| image_overlap(id, h, m, threshold))
        .collect::<Result<Vec<_>>>()?;
    summarize(rows, threshold)
}

/// An evaluation image, its identifier, and its mask if one exists.
#[derive(Debug, Clone)]
pub struct MaskedImage {
    pub id: String,
    pub image: Image,
    pub mask: Option<BinaryMask>,
}

/// Extracts the global heatmap of every mask-bearing image and reports the
/// overlap statistics. Images without a mask are skipped.
pub fn dataset_report<T: Real>(
    params: &SubnetParams<T>,
    items: &[MaskedImage],
    threshold: f64,
) -> Result<MaskOverlapReport> {
    let with_masks: Vec<&MaskedImage> = items.iter().filter(|m| m.mask.is_some()).collect();
    if with_masks.is_empty() {
        return Err(Error::Empty("mask-bearing image set"));
    }
    let eval = |item: &MaskedImage| -> Result<ImageOverlap> {
        let heatmap = extract_heatmap(params, &item.image)?;
        image_overlap(&item.id, &heatmap, item.mask.as_ref().expect("filtered"), threshold)
    };

    #[cfg(feature = "parallel")]
    let rows = {
        use rayon::prelude::*;
        with_masks.par_iter().map(|m| eval(m)).collect::<Result<Vec<_>>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let rows = with_masks.iter().map(|m| eval(m)).collect::<Result<Vec<_>>>()?;

    summarize(rows, threshold)
}
