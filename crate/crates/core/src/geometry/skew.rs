//! Method-of-moments skew-normal fit.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest skewness a skew-normal distribution can reach (`δ → ±1`).
pub const MAX_SKEWNESS: f64 = 0.995_271_746_431_156;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SkewNormalFit {
    /// ξ
    pub location: f64,
    /// ω
    pub scale: f64,
    /// α
    pub shape: f64,
    pub sample_count: usize,
    /// Sample skewness was outside the attainable range; a normal fit (α = 0) was used.
    pub fell_back_to_normal: bool,
}

impl SkewNormalFit {
    pub fn delta(&self) -> f64 {
        self.shape / (1.0 + self.shape * self.shape).sqrt()
    }

    pub fn mean(&self) -> f64 {
        self.location + self.scale * self.delta() * (2.0 / PI).sqrt()
    }

    pub fn variance(&self) -> f64 {
        let d = self.delta();
        self.scale * self.scale * (1.0 - 2.0 * d * d / PI)
    }

    pub fn std_dev(&self) -> f64 {
        self.variance().sqrt()
    }

    pub fn skewness(&self) -> f64 {
        skewness_of_delta(self.delta())
    }
}

pub fn skewness_of_delta(d: f64) -> f64 {
    let m = d * (2.0 / PI).sqrt();
    (4.0 - PI) / 2.0 * m.powi(3) / (1.0 - m * m).powf(1.5)
}

/// Sample mean, unbiased variance and moment skewness `m3 / m2^1.5`.
pub fn sample_moments(samples: &[f64]) -> (f64, f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let (mut m2, mut m3) = (0.0, 0.0);
    for &x in samples {
        let d = x - mean;
        m2 += d * d;
        m3 += d * d * d;
    }
    let (m2, m3) = (m2 / n, m3 / n);
    let skew = if m2 > 0.0 { m3 / m2.powf(1.5) } else { 0.0 };
    let var = if n > 1.0 { m2 * n / (n - 1.0) } else { 0.0 };
    (mean, var, skew)
}

/// Inverts the skew-normal moment equations for `(ξ, ω, α)`.
pub fn fit_skew_normal(samples: &[f64]) -> Result<SkewNormalFit> {
    if samples.len() < 8 {
        return Err(Error::InvalidArgument(format!("{} samples, need at least 8", samples.len())));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("sample".into()));
    }
    let (mean, var, skew) = sample_moments(samples);
    let spread = samples.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v)) - samples.iter().fold(f64::INFINITY, |m, &v| m.min(v));
    if spread == 0.0 || var <= 0.0 {
        return Err(Error::DegenerateVariance);
    }
    let n = samples.len();
    if skew.abs() >= MAX_SKEWNESS {
        return Ok(SkewNormalFit { location: mean, scale: var.sqrt(), shape: 0.0, sample_count: n, fell_back_to_normal: true });
    }
    let c = (2.0 * skew.abs() / (4.0 - PI)).cbrt();
    let delta = (PI / 2.0 * c * c / (1.0 + c * c)).sqrt().copysign(skew);
    let shape = delta / (1.0 - delta * delta).sqrt();
    let scale = (var / (1.0 - 2.0 * delta * delta / PI)).sqrt();
    let location = mean - scale * delta * (2.0 / PI).sqrt();
    Ok(SkewNormalFit { location, scale, shape, sample_count: n, fell_back_to_normal: false })
}
