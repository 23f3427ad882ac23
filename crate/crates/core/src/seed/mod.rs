//! Classical bootstrap annotation.
//!
//! Smoothing and a mean threshold give a first binary segmentation of the
//! bright pool interiors; contours are traced for inspection, and expert
//! correction points (split / merge) are applied algorithmically before the
//! result is turned into a three-class [`AnnotationMask`].

mod contours;
mod corrections;

pub use contours::{extract_contours, fill_contour, Contour, ContourSet};
pub use corrections::{apply_corrections, CorrectionConfig, CorrectionKind, CorrectionPoint};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{AnnotationMask, MaskClass, RawImage};
use crate::labeling::{label_components, Connectivity};

/// Two-level mask, one byte per pixel holding 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut m = Self::new(width, height);
        for y in 0..height {
            for x in 0..width {
                m.data[y * width + x] = u8::from(f(x, y));
            }
        }
        m
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = u8::from(v);
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// Number of 4-connected foreground regions.
    pub fn region_count(&self) -> usize {
        label_components(self.width, self.height, Connectivity::Four, |x, y| self.get(x, y)).count
    }

    /// Pool interiors of a three-class mask: pixels that are neither boundary nor defect.
    pub fn interiors_of(mask: &AnnotationMask) -> Self {
        Self::from_fn(mask.width, mask.height, |x, y| mask.get(x, y) == MaskClass::Background)
    }

    pub fn to_image(&self) -> RawImage {
        RawImage::from_fn(self.width, self.height, |x, y| if self.get(x, y) { 255.0 } else { 0.0 })
    }
}

/// Normalized 1-D Gaussian taps; the 2-D kernel is their outer product.
pub fn gaussian_kernel_1d(kernel_size: usize, sigma: f64) -> Result<Vec<f64>> {
    if kernel_size % 2 == 0 {
        return Err(Error::EvenKernel(kernel_size));
    }
    if sigma <= 0.0 || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!("sigma {sigma}")));
    }
    let r = (kernel_size / 2) as f64;
    let mut k: Vec<f64> =
        (0..kernel_size).map(|i| (-(i as f64 - r).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    Ok(k)
}

/// Mirror index without repeating the edge pixel (`dcb|abcd|cba`).
#[inline]
pub(crate) fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - m;
    }
    m as usize
}

/// Separable Gaussian convolution with reflected borders, per channel.
pub fn gaussian_smooth(img: &RawImage, kernel_size: usize, sigma: f64) -> Result<RawImage> {
    let k = gaussian_kernel_1d(kernel_size, sigma)?;
    let r = (kernel_size / 2) as i64;
    let (w, h, c) = (img.width(), img.height(), img.channels());
    let src = img.data();
    let mut tmp = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (t, kv) in k.iter().enumerate() {
                    let xx = reflect(x as i64 + t as i64 - r, w);
                    acc += kv * src[(y * w + xx) * c + ch];
                }
                tmp[(y * w + x) * c + ch] = acc;
            }
        }
    }
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (t, kv) in k.iter().enumerate() {
                    let yy = reflect(y as i64 + t as i64 - r, h);
                    acc += kv * tmp[(yy * w + x) * c + ch];
                }
                out[(y * w + x) * c + ch] = acc.clamp(0.0, 255.0);
            }
        }
    }
    RawImage::new(w, h, c, out)
}

/// `1` where the pixel strictly exceeds the image mean.
pub fn threshold_mean(img: &RawImage) -> Result<BinaryMask> {
    if img.channels() != 1 {
        return Err(Error::InvalidArgument("threshold_mean expects a single-channel image".into()));
    }
    let mean = img.mean();
    Ok(BinaryMask::from_fn(img.width(), img.height(), |x, y| img.get(x, y, 0) > mean))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedConfig {
    /// Odd kernel sizes applied in sequence (the "varying kernel sizes" smearing pass).
    pub kernel_sizes: Vec<usize>,
    pub sigma: f64,
    /// Dark components up to this many pixels may be labeled as defects.
    pub max_defect_area: usize,
    pub min_defect_area: usize,
    /// Minimum fraction of the bounding box a defect must fill; rejects thin boundary fragments.
    pub min_defect_fill: f64,
}

impl Default for SeedConfig {
    fn default() -> Self {
        Self { kernel_sizes: vec![3, 5], sigma: 1.0, max_defect_area: 400, min_defect_area: 4, min_defect_fill: 0.45 }
    }
}

/// Smoothing followed by the mean threshold; foreground marks bright pool interiors.
pub fn seed_binary(img: &RawImage, cfg: &SeedConfig) -> Result<BinaryMask> {
    let mut smoothed = img.luminance();
    for &k in &cfg.kernel_sizes {
        smoothed = gaussian_smooth(&smoothed, k, cfg.sigma)?;
    }
    threshold_mean(&smoothed)
}

/// Converts a binary interior mask into the three-class scheme.
///
/// Background (dark) pixels become boundary, except compact dark blobs that
/// are small, darker on average than the image mean and not on the image
/// border; those become defects.
pub fn seed_annotation(img: &RawImage, binary: &BinaryMask, cfg: &SeedConfig) -> Result<AnnotationMask> {
    if img.width() != binary.width || img.height() != binary.height {
        return Err(Error::DimensionMismatch("image and binary mask differ in size".into()));
    }
    let lum = img.luminance();
    let mean = lum.mean();
    let (w, h) = (binary.width, binary.height);
    let dark = label_components(w, h, Connectivity::Four, |x, y| !binary.get(x, y));
    let n = dark.count;
    let mut sum = vec![0.0; n];
    let mut area = vec![0usize; n];
    let mut bbox = vec![(usize::MAX, usize::MAX, 0usize, 0usize); n];
    for y in 0..h {
        for x in 0..w {
            let l = dark.get(x, y);
            if l == 0 {
                continue;
            }
            let i = l as usize - 1;
            sum[i] += lum.get(x, y, 0);
            area[i] += 1;
            let b = &mut bbox[i];
            *b = (b.0.min(x), b.1.min(y), b.2.max(x), b.3.max(y));
        }
    }
    let border = dark.touches_border();
    let is_defect: Vec<bool> = (0..n)
        .map(|i| {
            let (x0, y0, x1, y1) = bbox[i];
            let fill = area[i] as f64 / ((x1 - x0 + 1) * (y1 - y0 + 1)) as f64;
            !border[i]
                && area[i] >= cfg.min_defect_area
                && area[i] <= cfg.max_defect_area
                && fill >= cfg.min_defect_fill
                && sum[i] / (area[i] as f64) < mean
        })
        .collect();
    let mut mask = AnnotationMask::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let l = dark.get(x, y);
            if l > 0 {
                let class = if is_defect[l as usize - 1] { MaskClass::Defect } else { MaskClass::Boundary };
                mask.set(x, y, class);
            }
        }
    }
    Ok(mask)
}

/// Writes corrected interiors back into a three-class mask.
///
/// Pixels that became interior are cleared to background; pixels that were
/// cut are drawn as boundary. Defects outside the edited pixels are kept.
pub fn merge_binary_into(mask: &AnnotationMask, interiors: &BinaryMask) -> Result<AnnotationMask> {
    if mask.width != interiors.width || mask.height != interiors.height {
        return Err(Error::DimensionMismatch("mask and interiors differ in size".into()));
    }
    let mut out = mask.clone();
    for y in 0..mask.height {
        for x in 0..mask.width {
            let was_interior = mask.get(x, y) == MaskClass::Background;
            let is_interior = interiors.get(x, y);
            if is_interior && !was_interior {
                out.set(x, y, MaskClass::Background);
            } else if !is_interior && was_interior {
                out.set(x, y, MaskClass::Boundary);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn kernel_normalized_and_even_rejected() {
        for (k, s) in [(1, 1.0), (3, 1.0), (5, 0.7), (11, 1.5), (31, 4.0)] {
            let taps = gaussian_kernel_1d(k, s).unwrap();
            let total: f64 = taps.iter().flat_map(|a| taps.iter().map(move |b| a * b)).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
        let img = RawImage::filled(4, 4, 1, 1.0);
        assert!(matches!(gaussian_smooth(&img, 4, 1.0), Err(Error::EvenKernel(4))));
    }

    #[test]
    fn constant_image_unchanged() {
        let img = RawImage::filled(9, 7, 1, 77.0);
        let out = gaussian_smooth(&img, 5, 1.3).unwrap();
        assert!(out.data().iter().all(|v| (v - 77.0).abs() < 1e-12));
    }

    #[test]
    fn impulse_response_is_kernel() {
        let img = RawImage::from_fn(7, 7, |x, y| if (x, y) == (3, 3) { 255.0 } else { 0.0 });
        let out = gaussian_smooth(&img, 3, 1.0).unwrap();
        // 2-D Gaussian with sigma 1 sampled on a 3x3 grid, normalized
        let g = |d: f64| (-d * d / 2.0).exp();
        let norm: f64 = (-1..=1).flat_map(|a| (-1..=1).map(move |b| g(a as f64) * g(b as f64))).sum();
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let expect = 255.0 * g(dx as f64) * g(dy as f64) / norm;
                let got = out.get((3 + dx) as usize, (3 + dy) as usize, 0);
                assert!((got - expect).abs() < 1e-9);
            }
        }
        assert_eq!(out.get(0, 0, 0), 0.0);
    }

    #[test]
    fn interior_mass_preserved() {
        let img = RawImage::from_fn(21, 21, |x, y| {
            if (8..13).contains(&x) && (8..13).contains(&y) {
                (x * 10 + y) as f64
            } else {
                0.0
            }
        });
        let before: f64 = img.data().iter().sum();
        let after: f64 = gaussian_smooth(&img, 5, 1.2).unwrap().data().iter().sum();
        assert!((before - after).abs() < 1e-6);
    }

    #[test]
    fn threshold_examples() {
        let img = RawImage::new(2, 2, 1, vec![0.0, 100.0, 200.0, 255.0]).unwrap();
        assert_eq!(threshold_mean(&img).unwrap().data, vec![0, 0, 1, 1]);
        let flat = RawImage::filled(3, 3, 1, 50.0);
        assert_eq!(threshold_mean(&flat).unwrap().count_ones(), 0);
        let rgb = RawImage::filled(2, 2, 3, 1.0);
        assert!(threshold_mean(&rgb).is_err());
    }

    proptest! {
        #[test]
        fn threshold_invariant_under_positive_affine(
            vals in proptest::collection::vec(0u8..=200, 16),
            slope in 0.1f64..1.2,
            offset in 0.0f64..10.0,
        ) {
            let a = RawImage::new(4, 4, 1, vals.iter().map(|&v| v as f64).collect()).unwrap();
            let b = RawImage::new(4, 4, 1, vals.iter().map(|&v| v as f64 * slope + offset).collect()).unwrap();
            // compare in exact arithmetic terms: scaled ties can round, so only
            // check pixels whose distance to the mean is not vanishingly small
            let ma = threshold_mean(&a).unwrap();
            let mb = threshold_mean(&b).unwrap();
            let mean = a.mean();
            for i in 0..16 {
                if (vals[i] as f64 - mean).abs() > 1e-9 {
                    prop_assert_eq!(ma.data[i], mb.data[i]);
                }
            }
        }
    }

    #[test]
    fn threshold_shift_invariance_exact() {
        let vals = [3.0, 9.0, 27.0, 81.0, 12.0, 0.0];
        let a = RawImage::new(3, 2, 1, vals.to_vec()).unwrap();
        let b = RawImage::new(3, 2, 1, vals.iter().map(|v| v + 64.0).collect()).unwrap();
        assert_eq!(threshold_mean(&a).unwrap(), threshold_mean(&b).unwrap());
    }

    #[test]
    fn seed_marks_dark_blob_as_defect() {
        // bright field crossed by a dark line, plus one dark square void
        let img = RawImage::from_fn(40, 40, |x, y| {
            if y == 20 {
                40.0
            } else if (8..13).contains(&x) && (5..10).contains(&y) {
                10.0
            } else {
                200.0
            }
        });
        let cfg = SeedConfig { kernel_sizes: vec![], ..SeedConfig::default() };
        let bin = seed_binary(&img, &cfg).unwrap();
        let mask = seed_annotation(&img, &bin, &cfg).unwrap();
        assert_eq!(mask.count(MaskClass::Defect), 25);
        assert_eq!(mask.count(MaskClass::Boundary), 40);
    }

    #[test]
    fn merge_binary_roundtrip() {
        let mut mask = AnnotationMask::new(5, 1);
        mask.set(2, 0, MaskClass::Boundary);
        mask.set(4, 0, MaskClass::Defect);
        let mut interiors = BinaryMask::interiors_of(&mask);
        assert_eq!(interiors.data, vec![1, 1, 0, 1, 0]);
        interiors.set(2, 0, true);
        interiors.set(0, 0, false);
        let out = merge_binary_into(&mask, &interiors).unwrap();
        assert_eq!(
            out.classes,
            vec![MaskClass::Boundary, MaskClass::Background, MaskClass::Background, MaskClass::Background, MaskClass::Defect]
        );
    }
}
