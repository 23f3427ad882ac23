//! Melt-pool regions, half-ellipse metrics and ensemble statistics.

mod ellipse;
mod skew;

pub use ellipse::{fit_half_ellipse, fit_half_ellipse_with, widest_chord, FitOptions, HalfEllipse, Residual};
pub use skew::{fit_skew_normal, sample_moments, skewness_of_delta, SkewNormalFit, MAX_SKEWNESS};

use std::f64::consts::PI;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{AnnotationMask, MaskClass};
use crate::labeling::{label_components, Connectivity};
use crate::seed::{extract_contours, BinaryMask};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeltPool {
    pub id: usize,
    /// Outer border pixels `(x, y)` of the region, in tracing order.
    pub boundary: Vec<(usize, usize)>,
    pub visible_area: usize,
    pub touches_edge: bool,
    pub ellipse: Option<HalfEllipse>,
    pub apparent_area: Option<f64>,
    pub aspect_ratio: Option<f64>,
    /// Why a non-edge pool has no ellipse.
    pub fit_error: Option<String>,
}

impl MeltPool {
    pub fn in_statistics(&self) -> bool {
        !self.touches_edge && self.ellipse.is_some()
    }
}

/// 4-connected components of background-class pixels, with outer borders and
/// border-contact flags. Ellipse fields are left empty.
pub fn extract_pool_regions(mask: &AnnotationMask) -> Vec<MeltPool> {
    let (w, h) = (mask.width, mask.height);
    if w == 0 || h == 0 {
        return Vec::new();
    }
    let labels = label_components(w, h, Connectivity::Four, |x, y| mask.get(x, y) == MaskClass::Background);
    let sizes = labels.sizes();
    let touches = labels.touches_border();
    // bounding boxes
    let mut bbox = vec![(usize::MAX, usize::MAX, 0usize, 0usize); labels.count];
    for y in 0..h {
        for x in 0..w {
            let l = labels.get(x, y);
            if l > 0 {
                let b = &mut bbox[l as usize - 1];
                *b = (b.0.min(x), b.1.min(y), b.2.max(x), b.3.max(y));
            }
        }
    }
    (0..labels.count)
        .into_par_iter()
        .map(|i| {
            let (x0, y0, x1, y1) = bbox[i];
            let local = BinaryMask::from_fn(x1 - x0 + 1, y1 - y0 + 1, |x, y| labels.get(x + x0, y + y0) == i as u32 + 1);
            let set = extract_contours(&local);
            let outer = set.contours.iter().find(|c| !c.is_hole).expect("non-empty component has an outer border");
            MeltPool {
                id: i,
                boundary: outer.points.iter().map(|&(x, y)| (x + x0, y + y0)).collect(),
                visible_area: sizes[i],
                touches_edge: touches[i],
                ellipse: None,
                apparent_area: None,
                aspect_ratio: None,
                fit_error: None,
            }
        })
        .collect()
}

/// Apparent area `π·a·b/2·scale²` and aspect ratio of width `2a` to depth `b`.
pub fn pool_metrics(e: &HalfEllipse, scale: f64) -> Result<(f64, f64)> {
    if !(e.a > 0.0 && e.b > 0.0 && scale > 0.0) || !(e.a.is_finite() && e.b.is_finite() && scale.is_finite()) {
        return Err(Error::InvalidArgument("semi-axes and scale must be positive".into()));
    }
    let area = PI * e.a * e.b / 2.0 * scale * scale;
    let width = 2.0 * e.a * scale;
    let height = e.b * scale;
    Ok((area, width.min(height) / width.max(height)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatsConfig {
    /// Micrometers per pixel.
    pub scale: f64,
    pub area_bin_width: f64,
    pub aspect_bin_width: f64,
    pub fit: FitOptions,
}

impl Default for StatsConfig {
    fn default() -> Self {
        Self { scale: 1.0, area_bin_width: 50.0, aspect_bin_width: 0.05, fit: FitOptions::default() }
    }
}

/// Fits every non-edge pool in place.
pub fn fit_pools(pools: &mut [MeltPool], cfg: &StatsConfig) {
    pools.par_iter_mut().filter(|p| !p.touches_edge).for_each(|p| {
        let poly: Vec<(f64, f64)> = p.boundary.iter().map(|&(x, y)| (x as f64, y as f64)).collect();
        match fit_half_ellipse_with(&poly, &cfg.fit).and_then(|e| pool_metrics(&e, cfg.scale).map(|m| (e, m))) {
            Ok((e, (area, aspect))) => {
                p.ellipse = Some(e);
                p.apparent_area = Some(area);
                p.aspect_ratio = Some(aspect);
            }
            Err(err) => p.fit_error = Some(err.to_string()),
        }
    });
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionSummary {
    pub bin_start: f64,
    pub bin_width: f64,
    pub counts: Vec<usize>,
    /// Index of the fullest bin (lowest on ties).
    pub mode_bin: usize,
    pub sample_count: usize,
    pub mean: f64,
    pub std_dev: f64,
    pub skewness: f64,
    pub positive_skew: bool,
    pub fit: Option<SkewNormalFit>,
    pub fit_error: Option<String>,
}

impl DistributionSummary {
    pub fn from_samples(samples: &[f64], bin_width: f64) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Empty("distribution samples".into()));
        }
        if !(bin_width > 0.0) {
            return Err(Error::InvalidArgument("bin width must be positive".into()));
        }
        let lo = samples.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let bin_start = (lo / bin_width).floor() * bin_width;
        let bin_of = |v: f64| ((v - bin_start) / bin_width).floor() as usize;
        let bins = bin_of(hi) + 1;
        let mut counts = vec![0; bins];
        for &v in samples {
            counts[bin_of(v).min(bins - 1)] += 1;
        }
        let mode_bin = counts.iter().enumerate().fold(0, |best, (i, &c)| if c > counts[best] { i } else { best });
        let (mean, var, skewness) = sample_moments(samples);
        let (fit, fit_error) = match fit_skew_normal(samples) {
            Ok(f) => (Some(f), None),
            Err(e) => (None, Some(e.to_string())),
        };
        Ok(Self {
            bin_start,
            bin_width,
            counts,
            mode_bin,
            sample_count: samples.len(),
            mean,
            std_dev: var.sqrt(),
            skewness,
            positive_skew: skewness > 0.2,
            fit,
            fit_error,
        })
    }

    /// `(bin_low, bin_high, count)` rows.
    pub fn histogram_rows(&self) -> Vec<(f64, f64, usize)> {
        self.counts
            .iter()
            .enumerate()
            .map(|(i, &c)| (self.bin_start + i as f64 * self.bin_width, self.bin_start + (i + 1) as f64 * self.bin_width, c))
            .collect()
    }
}

/// Area and aspect-ratio distributions over the pools that enter statistics.
pub fn summarize_distributions(pools: &[MeltPool], cfg: &StatsConfig) -> Result<(DistributionSummary, DistributionSummary)> {
    let used: Vec<&MeltPool> = pools.iter().filter(|p| p.in_statistics()).collect();
    if used.is_empty() {
        return Err(Error::Empty("no pool enters statistics".into()));
    }
    let areas: Vec<f64> = used.iter().map(|p| p.apparent_area.expect("fitted")).collect();
    let aspects: Vec<f64> = used.iter().map(|p| p.aspect_ratio.expect("fitted")).collect();
    Ok((
        DistributionSummary::from_samples(&areas, cfg.area_bin_width)?,
        DistributionSummary::from_samples(&aspects, cfg.aspect_bin_width)?,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolCounts {
    pub extracted: usize,
    pub touches_edge: usize,
    pub unfit: usize,
    pub used: usize,
}

impl PoolCounts {
    pub fn of(pools: &[MeltPool]) -> Self {
        Self {
            extracted: pools.len(),
            touches_edge: pools.iter().filter(|p| p.touches_edge).count(),
            unfit: pools.iter().filter(|p| !p.touches_edge && p.ellipse.is_none()).count(),
            used: pools.iter().filter(|p| p.in_statistics()).count(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub config: StatsConfig,
    pub counts: PoolCounts,
    pub area: DistributionSummary,
    pub aspect: DistributionSummary,
    pub pools: Vec<MeltPool>,
}

/// Extracts and fits the pools of every mask, then summarizes them together.
pub fn analyze_masks(masks: &[&AnnotationMask], cfg: &StatsConfig) -> Result<StatsReport> {
    let mut pools = Vec::new();
    for m in masks {
        let mut p = extract_pool_regions(m);
        fit_pools(&mut p, cfg);
        pools.extend(p);
    }
    for (i, p) in pools.iter_mut().enumerate() {
        p.id = i;
    }
    let (area, aspect) = summarize_distributions(&pools, cfg)?;
    Ok(StatsReport { config: *cfg, counts: PoolCounts::of(&pools), area, aspect, pools })
}

#[derive(Serialize)]
struct PoolRow {
    id: usize,
    visible_area: usize,
    touches_edge: bool,
    cx: Option<f64>,
    cy: Option<f64>,
    a: Option<f64>,
    b: Option<f64>,
    residual: Option<f64>,
    apparent_area: Option<f64>,
    aspect_ratio: Option<f64>,
}

impl StatsReport {
    pub fn write_pools_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for p in &self.pools {
            let e = p.ellipse;
            out.serialize(PoolRow {
                id: p.id,
                visible_area: p.visible_area,
                touches_edge: p.touches_edge,
                cx: e.map(|e| e.cx),
                cy: e.map(|e| e.cy),
                a: e.map(|e| e.a),
                b: e.map(|e| e.b),
                residual: e.map(|e| e.residual),
                apparent_area: p.apparent_area,
                aspect_ratio: p.aspect_ratio,
            })?;
        }
        out.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    /// Plot-ready histogram table: `metric,bin_low,bin_high,count`.
    pub fn write_histograms_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["metric", "bin_low", "bin_high", "count"])?;
        for (name, d) in [("area", &self.area), ("aspect", &self.aspect)] {
            for (lo, hi, c) in d.histogram_rows() {
                out.write_record([name.to_string(), lo.to_string(), hi.to_string(), c.to_string()])?;
            }
        }
        out.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}
