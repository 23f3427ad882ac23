//! Structural similarity, difference images and checkpoint ranking.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{decode_overlay_lenient, from_model_range, ClassPalette, ImagePair, ModelImage, RawImage};
use crate::nn::{NetworkCheckpoint, NetworkParameters, Tensor};
use crate::seed::{gaussian_kernel_1d, reflect};

pub const WINDOW: usize = 11;
pub const WINDOW_SIGMA: f64 = 1.5;
pub const C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
pub const C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);

#[derive(Debug, Clone, PartialEq)]
pub struct SsimReport {
    /// Mean of the local map, clamped into `[0, 1]`.
    pub index: f64,
    /// Local map scaled so that 1 maps to 255; negative values clip to 0.
    pub difference_image: RawImage,
}

/// Per-pixel SSIM factors: luminance `l` and contrast-structure `cs`; `ssim = l · cs`.
#[derive(Debug, Clone, PartialEq)]
pub struct SsimMaps {
    pub width: usize,
    pub height: usize,
    pub luminance: Vec<f64>,
    pub contrast_structure: Vec<f64>,
}

impl SsimMaps {
    pub fn ssim(&self) -> Vec<f64> {
        self.luminance.iter().zip(&self.contrast_structure).map(|(l, cs)| l * cs).collect()
    }
}

/// Separable weighted local mean with mirrored borders.
fn window_mean(src: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let r = (k.len() / 2) as i64;
    let mut tmp = vec![0.0; src.len()];
    tmp.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for (x, out) in row.iter_mut().enumerate() {
            *out = k.iter().enumerate().map(|(t, kv)| kv * src[y * w + reflect(x as i64 + t as i64 - r, w)]).sum();
        }
    });
    let mut out = vec![0.0; src.len()];
    out.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for (x, o) in row.iter_mut().enumerate() {
            *o = k.iter().enumerate().map(|(t, kv)| kv * tmp[reflect(y as i64 + t as i64 - r, h) * w + x]).sum();
        }
    });
    out
}

fn gray(img: &RawImage) -> RawImage {
    img.luminance()
}

pub fn ssim_maps(a: &RawImage, b: &RawImage) -> Result<SsimMaps> {
    if (a.width(), a.height()) != (b.width(), b.height()) {
        return Err(Error::DimensionMismatch(format!(
            "{}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    let (a, b) = (gray(a), gray(b));
    let (w, h) = (a.width(), a.height());
    let k = gaussian_kernel_1d(WINDOW, WINDOW_SIGMA)?;
    let (da, db) = (a.data(), b.data());
    let sq = |s: &[f64]| s.iter().map(|v| v * v).collect::<Vec<_>>();
    let prod: Vec<f64> = da.iter().zip(db).map(|(x, y)| x * y).collect();
    let mu_a = window_mean(da, w, h, &k);
    let mu_b = window_mean(db, w, h, &k);
    let e_aa = window_mean(&sq(da), w, h, &k);
    let e_bb = window_mean(&sq(db), w, h, &k);
    let e_ab = window_mean(&prod, w, h, &k);
    let n = w * h;
    let mut luminance = Vec::with_capacity(n);
    let mut contrast_structure = Vec::with_capacity(n);
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let var_a = e_aa[i] - ma * ma;
        let var_b = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        luminance.push((2.0 * ma * mb + C1) / (ma * ma + mb * mb + C1));
        contrast_structure.push((2.0 * cov + C2) / (var_a + var_b + C2));
    }
    Ok(SsimMaps { width: w, height: h, luminance, contrast_structure })
}

/// Gaussian-windowed SSIM of two images (RGB inputs are reduced to Rec. 601 luminance).
pub fn ssim_index(a: &RawImage, b: &RawImage) -> Result<SsimReport> {
    let maps = ssim_maps(a, b)?;
    let map = maps.ssim();
    let mean = map.iter().sum::<f64>() / map.len() as f64;
    let diff = map.iter().map(|v| v.clamp(0.0, 1.0) * 255.0).collect();
    Ok(SsimReport {
        index: mean.clamp(0.0, 1.0),
        difference_image: RawImage::new(maps.width, maps.height, 1, diff)?,
    })
}

/// Fraction of pixels whose decoded class agrees.
pub fn pixel_accuracy(a: &RawImage, b: &RawImage, palette: &ClassPalette) -> Result<f64> {
    if (a.width(), a.height()) != (b.width(), b.height()) {
        return Err(Error::DimensionMismatch("pixel accuracy inputs".into()));
    }
    let ma = decode_overlay_lenient(a, palette);
    let mb = decode_overlay_lenient(b, palette);
    let same = ma.classes.iter().zip(&mb.classes).filter(|(x, y)| x == y).count();
    Ok(same as f64 / ma.classes.len() as f64)
}

/// Inference-mode generator output rendered as an RGB overlay.
pub fn predict_overlay(params: &NetworkParameters, input: &ModelImage) -> Result<RawImage> {
    let x = Tensor::from_images(&[input])?;
    let out = params.generator.forward_inference(&x)?;
    Ok(from_model_range(&out.to_images()[0]))
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointScore {
    /// Index into the ranked input list.
    pub position: usize,
    pub step: u64,
    pub mean_ssim: f64,
    pub median_ssim: f64,
    pub pixel_accuracy: f64,
    pub per_image: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub rankings: Vec<CheckpointScore>,
}

/// Scores a generator on every validation pair.
pub fn score_generator(params: &NetworkParameters, validation: &[ImagePair], palette: &ClassPalette) -> Result<(Vec<f64>, f64)> {
    let mut scores = Vec::with_capacity(validation.len());
    let mut acc = 0.0;
    for pair in validation {
        let pred = predict_overlay(params, &pair.input)?;
        let target = from_model_range(&pair.target);
        scores.push(ssim_index(&pred, &target)?.index);
        acc += pixel_accuracy(&pred, &target, palette)?;
    }
    Ok((scores, acc / validation.len() as f64))
}

/// Orders checkpoints by mean validation SSIM, highest first; ties go to the later step.
pub fn rank_checkpoints(checkpoints: &[NetworkCheckpoint], validation: &[ImagePair]) -> Result<Vec<CheckpointScore>> {
    rank_checkpoints_with(checkpoints, validation, &ClassPalette::default())
}

pub fn rank_checkpoints_with(
    checkpoints: &[NetworkCheckpoint],
    validation: &[ImagePair],
    palette: &ClassPalette,
) -> Result<Vec<CheckpointScore>> {
    if validation.is_empty() {
        return Err(Error::Empty("validation set".into()));
    }
    if checkpoints.is_empty() {
        return Err(Error::Empty("checkpoint list".into()));
    }
    let mut scored = checkpoints
        .par_iter()
        .enumerate()
        .map(|(position, ck)| {
            let (per_image, pixel_accuracy) = score_generator(&ck.params, validation, palette)?;
            Ok(CheckpointScore {
                position,
                step: ck.step,
                mean_ssim: per_image.iter().sum::<f64>() / per_image.len() as f64,
                median_ssim: median(&per_image),
                pixel_accuracy,
                per_image,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| b.mean_ssim.total_cmp(&a.mean_ssim).then(b.step.cmp(&a.step)).then(a.position.cmp(&b.position)));
    Ok(scored)
}
