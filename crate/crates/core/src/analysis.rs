//! Closed-form convergence behaviour of the averaged loss on two-feature
//! datasets, and generators for the synthetic square datasets that test it.
//!
//! Model: class-1 images carry `a` patches of a shared feature and `b`
//! patches of a class-1-only feature; class-0 images carry `a + b` shared
//! patches. With `p0`/`p1` the subnet outputs on the two patch kinds, one
//! image pair costs `-ln(1 - p0) - ln((a p0 + b p1) / (a + b))`, minimized at
//! `p1 = 1` and `p0 = max(0, (a - b) / 2a)`.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::imaging::Image;
use crate::nn::{subnet_forward, PatchDims, SubnetParams};
use crate::optim::Sample;
use crate::patchcore::{axis_anchors, centered_anchor, PatchConfig};
use crate::tensor::{Real, Tensor};
use num_traits::Float;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureCounts {
    /// Class-1 patches showing only the shared feature.
    pub a: u64,
    /// Class-1 patches showing the class-1 feature.
    pub b: u64,
}

impl FeatureCounts {
    pub fn new(a: u64, b: u64) -> Result<Self> {
        if a + b == 0 {
            return Err(invalid("feature counts", "a + b must be at least 1"));
        }
        Ok(Self { a, b })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvergencePoint {
    pub p0: f64,
    pub p1: f64,
}

pub fn converged_probs(fc: FeatureCounts) -> Result<ConvergencePoint> {
    if fc.b == 0 {
        return Err(Error::NoClassOneFeatures);
    }
    let p0 = if fc.a > fc.b {
        (fc.a - fc.b) as f64 / (2 * fc.a) as f64
    } else {
        0.0
    };
    Ok(ConvergencePoint { p0, p1: 1.0 })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LandscapePoint {
    pub loss: f64,
    pub d_p0: f64,
    pub d_p1: f64,
}

/// Per-pair loss and its partial derivatives on the open unit square.
pub fn loss_landscape(fc: FeatureCounts, p0: f64, p1: f64) -> Result<LandscapePoint> {
    for (name, v) in [("p0", p0), ("p1", p1)] {
        if !(v > 0.0 && v < 1.0) {
            return Err(invalid(name, alloc::format!("{v} outside (0, 1)")));
        }
    }
    let (a, b) = (fc.a as f64, fc.b as f64);
    let mix = a * p0 + b * p1;
    Ok(LandscapePoint {
        loss: -Float::ln(1.0 - p0) - Float::ln(mix / (a + b)),
        d_p0: -1.0 / (p0 - 1.0) - a / mix,
        d_p1: -b / mix,
    })
}

/// Zero background with one rectangle of `foreground` pixels in class-1 images.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyntheticSpec {
    pub height: usize,
    pub width: usize,
    pub square_height: usize,
    pub square_width: usize,
    /// Top-left corner of the rectangle.
    pub anchor: (usize, usize),
    /// Pixel value of the class-1 feature; 255 maps to 1.0 after patch
    /// normalization.
    pub foreground: u8,
    pub copies_per_class: usize,
}

impl SyntheticSpec {
    /// `size x size` images with a `square x square` upper-left feature.
    pub fn upper_left(size: usize, square: usize) -> Self {
        Self {
            height: size,
            width: size,
            square_height: square,
            square_width: square,
            anchor: (0, 0),
            foreground: 255,
            copies_per_class: 1,
        }
    }

    /// Upper-left quadrant feature, tiled by four half-size patches.
    pub fn quadrant(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            square_height: height / 2,
            square_width: width / 2,
            anchor: (0, 0),
            foreground: 255,
            copies_per_class: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(invalid("synthetic dims", "image sides must be positive"));
        }
        if self.square_height == 0 || self.square_width == 0 {
            return Err(invalid(
                "synthetic square",
                "zero-size feature makes both classes identical",
            ));
        }
        if self.foreground == 0 {
            return Err(invalid("synthetic foreground", "must differ from the zero background"));
        }
        let (r, c) = self.anchor;
        if r + self.square_height > self.height || c + self.square_width > self.width {
            return Err(invalid("synthetic square", "rectangle does not fit inside the image"));
        }
        if self.copies_per_class == 0 {
            return Err(invalid("copies per class", "must be at least 1"));
        }
        Ok(())
    }

    #[inline]
    fn in_square(&self, row: usize, col: usize) -> bool {
        let (r, c) = self.anchor;
        row >= r && row < r + self.square_height && col >= c && col < c + self.square_width
    }

    pub fn feature_pixels(&self) -> usize {
        self.square_height * self.square_width
    }
}

pub fn class_one_image(spec: &SyntheticSpec) -> Result<Image> {
    spec.validate()?;
    let mut img = Image::filled(spec.height, spec.width, 1, 0)?;
    for y in 0..spec.height {
        for x in 0..spec.width {
            if spec.in_square(y, x) {
                img.set(y, x, 0, spec.foreground);
            }
        }
    }
    Ok(img)
}

/// Binary feature mask (255 inside the rectangle) for class-1 images.
pub fn feature_mask(spec: &SyntheticSpec) -> Result<Image> {
    let mut spec = *spec;
    spec.foreground = 255;
    class_one_image(&spec)
}

/// `copies_per_class` all-zero class-0 images followed by as many class-1 images.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    let zero = Image::filled(spec.height, spec.width, 1, 0)?;
    let one = class_one_image(spec)?;
    let mut out = Vec::with_capacity(2 * spec.copies_per_class);
    for _ in 0..spec.copies_per_class {
        out.push(Sample::new(zero.clone(), 0)?);
    }
    for _ in 0..spec.copies_per_class {
        out.push(Sample::new(one.clone(), 1)?);
    }
    Ok(out)
}

fn square_overlap(spec: &SyntheticSpec, top: isize, left: isize, h: usize, w: usize) -> usize {
    let (r, c) = (spec.anchor.0 as isize, spec.anchor.1 as isize);
    let rows = (top + h as isize).min(r + spec.square_height as isize) - top.max(r);
    let cols = (left + w as isize).min(c + spec.square_width as isize) - left.max(c);
    (rows.max(0) * cols.max(0)) as usize
}

/// Exact counts over the training patch grid of a class-1 image: patches
/// with no feature pixel count toward `a`, patches with any toward `b`.
pub fn training_feature_counts(spec: &SyntheticSpec, patch: &PatchConfig) -> Result<FeatureCounts> {
    spec.validate()?;
    patch.validate(spec.height, spec.width)?;
    let rows = axis_anchors(spec.height, patch.height, patch.stride_y, patch.coverage);
    let cols = axis_anchors(spec.width, patch.width, patch.stride_x, patch.coverage);
    let (mut a, mut b) = (0, 0);
    for &r in &rows {
        for &c in &cols {
            if square_overlap(spec, r as isize, c as isize, patch.height, patch.width) > 0 {
                b += 1;
            } else {
                a += 1;
            }
        }
    }
    FeatureCounts::new(a, b)
}

/// Stride-1 centered (zero-padded) patch census of a class-1 image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CenteredCensus {
    pub total: usize,
    /// Patches lying entirely inside the feature rectangle.
    pub pure_feature: usize,
    /// Patches touching the rectangle at all.
    pub any_feature: usize,
}

pub fn centered_census(spec: &SyntheticSpec, dims: PatchDims) -> Result<CenteredCensus> {
    spec.validate()?;
    let full = dims.area();
    let mut census = CenteredCensus {
        total: spec.height * spec.width,
        pure_feature: 0,
        any_feature: 0,
    };
    for y in 0..spec.height {
        for x in 0..spec.width {
            let (top, left) = centered_anchor(dims, y, x);
            let overlap = square_overlap(spec, top, left, dims.height, dims.width);
            census.any_feature += usize::from(overlap > 0);
            census.pure_feature += usize::from(overlap == full);
        }
    }
    Ok(census)
}

/// The coarse count that treats every feature pixel as one feature patch:
/// `b = square area`, `a = image area - b`.
pub fn pixel_feature_counts(spec: &SyntheticSpec) -> Result<FeatureCounts> {
    spec.validate()?;
    let b = spec.feature_pixels() as u64;
    FeatureCounts::new((spec.height * spec.width) as u64 - b, b)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvergenceCheck {
    /// Subnet output on an all-zeros patch.
    pub p0_observed: f64,
    /// Subnet output on an all-ones patch.
    pub p1_observed: f64,
    pub predicted: ConvergencePoint,
    pub tolerance: f64,
    pub passed: bool,
}

/// Probes the subnet with an all-zeros and an all-ones patch and compares
/// against [`converged_probs`]: passes when `|p0 - predicted| <= tolerance`
/// and `p1 >= 1 - tolerance`.
pub fn verify_convergence<T: Real>(
    params: &SubnetParams<T>,
    counts: FeatureCounts,
    tolerance: f64,
) -> Result<ConvergenceCheck> {
    let predicted = converged_probs(counts)?;
    let d = params.dims;
    let shape = [1, d.channels, d.height, d.width];
    let mut probes = vec![T::zero(); 2 * d.patch_len()];
    probes[d.patch_len()..].iter_mut().for_each(|v| *v = T::one());
    let q = subnet_forward(params, &Tensor::new(vec![2, shape[1], shape[2], shape[3]], probes)?)?;
    let (p0, p1) = (q.data()[0].f64(), q.data()[1].f64());
    Ok(ConvergenceCheck {
        p0_observed: p0,
        p1_observed: p1,
        predicted,
        tolerance,
        passed: (p0 - predicted.p0).abs() <= tolerance && p1 >= predicted.p1 - tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::kaiming_init;
    use crate::patchcore::Coverage;
    use crate::tensor::RngState;

    fn fc(a: u64, b: u64) -> FeatureCounts {
        FeatureCounts::new(a, b).unwrap()
    }

    #[test]
    fn worked_example_values() {
        let p = converged_probs(fc(3, 1)).unwrap();
        assert!((p.p0 - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(p.p1, 1.0);
        let p = converged_probs(fc(12288, 4096)).unwrap();
        assert!((p.p0 - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(
            converged_probs(fc(2, 5)).unwrap(),
            ConvergencePoint { p0: 0.0, p1: 1.0 }
        );
        assert_eq!(converged_probs(fc(4, 4)).unwrap().p0, 0.0);
        assert_eq!(converged_probs(fc(3, 0)), Err(Error::NoClassOneFeatures));
    }

    #[test]
    fn p0_decreases_in_b() {
        for a in [5u64, 17, 100] {
            let vals: Vec<f64> = (1..a).map(|b| converged_probs(fc(a, b)).unwrap().p0).collect();
            assert!(vals.windows(2).all(|w| w[1] < w[0]));
        }
    }

    #[test]
    fn p0_approaches_half() {
        let mut prev = 0.0;
        for k in 1..9 {
            let a = 10u64.pow(k);
            let p0 = converged_probs(fc(a, 1)).unwrap().p0;
            assert!((0.5 - p0 - 0.5 / a as f64).abs() < 1e-12);
            assert!(p0 > prev);
            prev = p0;
        }
    }

    #[test]
    fn landscape_signs_and_stationarity() {
        let f = fc(3, 1);
        let mut rng = RngState::new(1);
        for _ in 0..200 {
            let (p0, p1) = (rng.uniform_in(1e-3, 1.0 - 1e-3), rng.uniform_in(1e-3, 1.0 - 1e-3));
            assert!(loss_landscape(f, p0, p1).unwrap().d_p1 < 0.0);
        }
        let at = loss_landscape(f, 1.0 / 3.0, 1.0 - 1e-6).unwrap();
        assert!(at.d_p0.abs() < 1e-5, "{}", at.d_p0);
        assert!(loss_landscape(f, 0.0, 0.5).is_err());
        assert!(loss_landscape(f, 0.5, 1.0).is_err());
    }

    #[test]
    fn landscape_partials_match_differences() {
        let h = 1e-6;
        for (a, b) in [(3, 1), (10, 7), (2, 5)] {
            let f = fc(a, b);
            for (p0, p1) in [(0.2, 0.7), (0.45, 0.3), (0.6, 0.95)] {
                let at = loss_landscape(f, p0, p1).unwrap();
                let l = |x, y| loss_landscape(f, x, y).unwrap().loss;
                let d0 = (l(p0 + h, p1) - l(p0 - h, p1)) / (2.0 * h);
                let d1 = (l(p0, p1 + h) - l(p0, p1 - h)) / (2.0 * h);
                assert!((d0 - at.d_p0).abs() < 1e-8, "{d0} vs {}", at.d_p0);
                assert!((d1 - at.d_p1).abs() < 1e-8, "{d1} vs {}", at.d_p1);
            }
        }
    }

    /// Projected gradient descent on the landscape lands on the closed form.
    #[test]
    fn descent_reaches_closed_form() {
        for (a, b) in [(3u64, 1u64), (49, 16), (33, 16), (12288, 4096)] {
            let f = fc(a, b);
            let want = converged_probs(f).unwrap();
            let mut rng = RngState::new(a ^ b);
            for _ in 0..3 {
                let (mut p0, mut p1) = (rng.uniform_in(0.05, 0.95), rng.uniform_in(0.05, 0.95));
                for _ in 0..200_000 {
                    let g = loss_landscape(f, p0, p1).unwrap();
                    p0 = (p0 - 1e-3 * g.d_p0).clamp(1e-9, 1.0 - 1e-9);
                    p1 = (p1 - 1e-3 * g.d_p1).clamp(1e-9, 1.0 - 1e-9);
                }
                assert!((p0 - want.p0).abs() < 1e-3, "{a},{b}: {p0} vs {}", want.p0);
                assert!((p1 - want.p1).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn quadrant_dataset() {
        let spec = SyntheticSpec::quadrant(8, 6);
        let set = generate_synthetic(&spec).unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(set[0].label, 0);
        assert!(set[0].image.data().iter().all(|&v| v == 0));
        let ones = set[1].image.data().iter().filter(|&&v| v == 255).count();
        assert_eq!(ones, 8 * 6 / 4);
        assert_eq!(set[1].image.get(0, 0, 0), 255);
        assert_eq!(set[1].image.get(4, 0, 0), 0);
    }

    #[test]
    fn degenerate_specs_are_rejected() {
        let mut spec = SyntheticSpec::upper_left(16, 0);
        assert!(generate_synthetic(&spec).is_err());
        spec.square_height = 10;
        spec.square_width = 10;
        spec.anchor = (8, 0);
        assert!(generate_synthetic(&spec).is_err());
    }

    #[test]
    fn census_of_large_square_experiment() {
        let spec = SyntheticSpec::upper_left(128, 64);
        let c = centered_census(&spec, PatchDims::square(17, 1).unwrap()).unwrap();
        assert_eq!(c.pure_feature, (64 - 16) * (64 - 16));
        assert_eq!(c.pure_feature, 2304);
        // the square grows by 8 pixels on its two interior sides
        assert_eq!(c.any_feature, 72 * 72);
        assert_eq!(pixel_feature_counts(&spec).unwrap(), fc(12288, 4096));
    }

    #[test]
    fn training_counts() {
        let quad = SyntheticSpec::quadrant(64, 64);
        assert_eq!(
            training_feature_counts(&quad, &PatchConfig::tiled(32)).unwrap(),
            fc(3, 1)
        );
        let small = SyntheticSpec::upper_left(32, 16);
        // anchors 0,5,10,15,20,25,27: rows/cols 0,5,10,15 touch the square
        assert_eq!(
            training_feature_counts(&small, &PatchConfig::tiled(5)).unwrap(),
            fc(33, 16)
        );
        let dropped = PatchConfig::tiled(5).with_coverage(Coverage::DropRemainder);
        assert_eq!(training_feature_counts(&small, &dropped).unwrap(), fc(20, 16));
    }

    #[test]
    fn untrained_head_fails_verification() {
        let mut p: SubnetParams<f32> = kaiming_init(&mut RngState::new(2), PatchDims::square(4, 1).unwrap());
        p.head.weights.fill(0.0);
        let check = verify_convergence(&p, fc(3, 1), 0.05).unwrap();
        assert_eq!(check.p0_observed, 0.5);
        assert_eq!(check.p1_observed, 0.5);
        assert!(!check.passed);
    }
}
