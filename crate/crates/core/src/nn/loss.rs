//! Adversarial + L1 objective.
//!
//! The discriminator minimizes `-mean log D(x, y) - mean log(1 - D(x, G(x)))`.
//! The generator minimizes the non-saturating adversarial surrogate
//! `-mean log D(x, G(x))` (or, with `saturating`, `mean log(1 - D(x, G(x)))`)
//! plus `lambda · mean |y - G(x)|`.

use serde::{Deserialize, Serialize};

use super::{PatchProbabilityMap, Tensor};
use crate::error::{Error, Result};
use crate::imaging::ModelImage;

/// Probabilities are clamped to `[LOG_EPS, 1 - LOG_EPS]` before taking logs.
pub const LOG_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda: f64,
    /// Use `log(1 - D)` for the generator instead of `-log D`.
    #[serde(default)]
    pub saturating: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda: 100.0, saturating: false }
    }
}

impl LossWeights {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!("lambda {lambda}")));
        }
        Ok(Self { lambda, saturating: false })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Losses {
    /// `-mean log D(x, y)`.
    pub d_real: f64,
    /// `-mean log(1 - D(x, G(x)))`.
    pub d_fake: f64,
    pub d_loss: f64,
    pub g_adv: f64,
    pub g_l1: f64,
    pub g_total: f64,
}

#[inline]
fn clamp_p(p: f64) -> f64 {
    p.clamp(LOG_EPS, 1.0 - LOG_EPS)
}

/// d/dp of a clamped quantity: zero where the clamp is active.
#[inline]
fn inside(p: f64) -> bool {
    p > LOG_EPS && p < 1.0 - LOG_EPS
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    s / n as f64
}

fn losses_from_slices(d_real: &[f64], d_fake: &[f64], y: &[f64], g: &[f64], w: &LossWeights) -> Result<Losses> {
    let finite = |s: &[f64]| s.iter().all(|v| v.is_finite());
    if !(finite(d_real) && finite(d_fake) && finite(y) && finite(g)) {
        return Err(Error::NonFinite("loss inputs".into()));
    }
    if d_real.len() != d_fake.len() || y.len() != g.len() || d_real.is_empty() || y.is_empty() {
        return Err(Error::DimensionMismatch("loss inputs".into()));
    }
    let d_real_term = -mean(d_real.iter().map(|&p| clamp_p(p).ln()));
    let d_fake_term = -mean(d_fake.iter().map(|&p| (1.0 - clamp_p(p)).ln()));
    let g_adv = if w.saturating {
        mean(d_fake.iter().map(|&p| (1.0 - clamp_p(p)).ln()))
    } else {
        -mean(d_fake.iter().map(|&p| clamp_p(p).ln()))
    };
    let g_l1 = mean(y.iter().zip(g).map(|(a, b)| (a - b).abs()));
    Ok(Losses {
        d_real: d_real_term,
        d_fake: d_fake_term,
        d_loss: d_real_term + d_fake_term,
        g_adv,
        g_l1,
        g_total: g_adv + w.lambda * g_l1,
    })
}

/// Losses for a single sample.
pub fn compute_losses(
    d_real: &PatchProbabilityMap,
    d_fake: &PatchProbabilityMap,
    y: &ModelImage,
    g_out: &ModelImage,
    w: &LossWeights,
) -> Result<Losses> {
    if d_real.size != d_fake.size || (y.height, y.width) != (g_out.height, g_out.width) {
        return Err(Error::DimensionMismatch("loss inputs".into()));
    }
    losses_from_slices(&d_real.data, &d_fake.data, &y.data, &g_out.data, w)
}

/// Batched losses over discriminator outputs and generator images.
pub(crate) fn batch_losses(d_real: &Tensor, d_fake: &Tensor, y: &Tensor, g: &Tensor, w: &LossWeights) -> Result<Losses> {
    losses_from_slices(&d_real.data, &d_fake.data, &y.data, &g.data, w)
}

/// Gradients of `d_loss` w.r.t. the real and fake probabilities.
pub fn discriminator_loss_grads(d_real: &Tensor, d_fake: &Tensor) -> (Tensor, Tensor) {
    let m = d_real.data.len() as f64;
    let gr = d_real.data.iter().map(|&p| if inside(p) { -1.0 / (m * p) } else { 0.0 }).collect();
    let gf = d_fake.data.iter().map(|&p| if inside(p) { 1.0 / (m * (1.0 - p)) } else { 0.0 }).collect();
    (
        Tensor { data: gr, ..d_real.clone_shape() },
        Tensor { data: gf, ..d_fake.clone_shape() },
    )
}

/// Gradients of `g_total` w.r.t. the fake probabilities and the generator output.
pub fn generator_loss_grads(d_fake: &Tensor, y: &Tensor, g: &Tensor, w: &LossWeights) -> (Tensor, Tensor) {
    let m = d_fake.data.len() as f64;
    let gp = d_fake
        .data
        .iter()
        .map(|&p| {
            if !inside(p) {
                0.0
            } else if w.saturating {
                -1.0 / (m * (1.0 - p))
            } else {
                -1.0 / (m * p)
            }
        })
        .collect();
    let count = g.data.len() as f64;
    let gg = y
        .data
        .iter()
        .zip(&g.data)
        .map(|(&a, &b)| {
            let s = if b > a { 1.0 } else if b < a { -1.0 } else { 0.0 };
            w.lambda * s / count
        })
        .collect();
    (Tensor { data: gp, ..d_fake.clone_shape() }, Tensor { data: gg, ..g.clone_shape() })
}

impl Tensor {
    fn clone_shape(&self) -> Tensor {
        Tensor { n: self.n, c: self.c, h: self.h, w: self.w, data: Vec::new() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(v: f64) -> ModelImage {
        ModelImage { height: 4, width: 4, data: vec![v; 48] }
    }

    #[test]
    fn perfect_discriminator_has_near_zero_loss() {
        let real = PatchProbabilityMap::filled(2, 1.0 - LOG_EPS);
        let fake = PatchProbabilityMap::filled(2, LOG_EPS);
        let l = compute_losses(&real, &fake, &img(0.0), &img(0.0), &LossWeights::default()).unwrap();
        assert!(l.d_loss.abs() < 1e-6);
        assert_eq!(l.g_l1, 0.0);
    }

    #[test]
    fn lambda_scales_l1() {
        let p = PatchProbabilityMap::filled(2, 0.5);
        let l = compute_losses(&p, &p, &img(0.3), &img(0.2), &LossWeights::new(100.0).unwrap()).unwrap();
        assert!((l.g_l1 - 0.1).abs() < 1e-12);
        assert!((l.g_total - l.g_adv - 10.0).abs() < 1e-9);
        let l0 = compute_losses(&p, &p, &img(0.3), &img(0.2), &LossWeights::new(0.0).unwrap()).unwrap();
        assert_eq!(l0.g_total, l0.g_adv);
    }

    #[test]
    fn adversarial_monotonicity() {
        let real = PatchProbabilityMap::filled(2, 0.7);
        let y = img(0.1);
        let w = LossWeights::default();
        let base = PatchProbabilityMap::new(2, vec![0.2, 0.4, 0.6, 0.8]).unwrap();
        let l0 = compute_losses(&real, &base, &y, &y, &w).unwrap();
        for i in 0..4 {
            let mut up = base.clone();
            up.data[i] += 0.05;
            let l1 = compute_losses(&real, &up, &y, &y, &w).unwrap();
            assert!(l1.d_loss > l0.d_loss);
            assert!(l1.g_adv < l0.g_adv);
        }
    }

    #[test]
    fn non_finite_rejected() {
        let p = PatchProbabilityMap { size: 1, data: vec![f64::NAN] };
        let q = PatchProbabilityMap::filled(1, 0.5);
        assert!(matches!(compute_losses(&p, &q, &img(0.0), &img(0.0), &LossWeights::default()), Err(Error::NonFinite(_))));
    }
}
