//! Constrained half-ellipse fit to the un-remelted bottom of a pool boundary.
//!
//! Image coordinates: `y` grows downward, so the bottom arc has `y > cy`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HalfEllipse {
    pub cx: f64,
    pub cy: f64,
    /// Semi-width.
    pub a: f64,
    /// Depth.
    pub b: f64,
    /// Rotation in radians; zero unless the rotated fit was requested.
    #[serde(default)]
    pub theta: f64,
    /// RMS residual over the fitted points.
    pub residual: f64,
    pub points_used: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Residual {
    /// `F(x, y) - 1` with `F = u²/a² + v²/b²`.
    Algebraic,
    /// `(F - 1) / |∇F|`, a first-order estimate of the orthogonal distance.
    /// Unlike the plain algebraic residual it does not shrink as the ellipse grows.
    Sampson,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    /// Fit an extra rotation angle instead of keeping the axes image-aligned.
    pub rotated: bool,
    /// Hold the center on the widest chord (`cy` fixed) instead of refining it.
    pub center_on_chord: bool,
    pub residual: Residual,
    pub max_iterations: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { rotated: false, center_on_chord: false, residual: Residual::Sampson, max_iterations: 200 }
    }
}

/// Widest horizontal chord of a closed polygon: `(y, x_min, x_max)`.
///
/// Candidate levels are the vertex `y` values. Among equally wide chords the
/// topmost wins.
pub fn widest_chord(poly: &[(f64, f64)]) -> Option<(f64, f64, f64)> {
    let mut levels: Vec<f64> = poly.iter().map(|p| p.1).collect();
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    let n = poly.len();
    let mut best: Option<(f64, f64, f64)> = None;
    for &yl in &levels {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for i in 0..n {
            let (p, q) = (poly[i], poly[(i + 1) % n]);
            if p.1 == yl {
                lo = lo.min(p.0);
                hi = hi.max(p.0);
            }
            if (p.1 - yl) * (q.1 - yl) < 0.0 {
                let x = p.0 + (yl - p.1) * (q.0 - p.0) / (q.1 - p.1);
                lo = lo.min(x);
                hi = hi.max(x);
            }
        }
        if hi >= lo && best.is_none_or(|(_, bl, bh)| hi - lo > bh - bl + 1e-9) {
            best = Some((yl, lo, hi));
        }
    }
    best
}

struct Problem<'a> {
    pts: &'a [(f64, f64)],
    rotated: bool,
    sampson: bool,
}

impl Problem<'_> {
    /// Parameters: `[cx, cy, a, b]` or `[cx, cy, a, b, theta]`.
    fn residuals(&self, p: &DVector<f64>, jac: Option<&mut DMatrix<f64>>) -> DVector<f64> {
        let (cx, cy, a, b) = (p[0], p[1], p[2], p[3]);
        let theta = if self.rotated { p[4] } else { 0.0 };
        let (s, c) = theta.sin_cos();
        let mut r = DVector::zeros(self.pts.len());
        let mut jac = jac;
        for (i, &(x, y)) in self.pts.iter().enumerate() {
            let (dx, dy) = (x - cx, y - cy);
            let u = dx * c + dy * s;
            let v = -dx * s + dy * c;
            let (a2, b2) = (a * a, b * b);
            let g = u * u / a2 + v * v / b2 - 1.0;
            // d(u, v)/d(cx, cy, a, b, theta)
            let du = [-c, -s, 0.0, 0.0, v];
            let dv = [s, -c, 0.0, 0.0, -u];
            let (gu, gv) = (2.0 * u / a2, 2.0 * v / b2);
            let mut dg = [0.0; 5];
            for k in 0..5 {
                dg[k] = gu * du[k] + gv * dv[k];
            }
            dg[2] = -2.0 * u * u / (a2 * a);
            dg[3] = -2.0 * v * v / (b2 * b);
            if !self.sampson {
                r[i] = g;
                if let Some(j) = jac.as_deref_mut() {
                    for k in 0..j.ncols() {
                        j[(i, k)] = dg[k];
                    }
                }
                continue;
            }
            // |∇F| = 2 sqrt(q), q = u²/a⁴ + v²/b⁴
            let (a4, b4) = (a2 * a2, b2 * b2);
            let q = (u * u / a4 + v * v / b4).max(1e-300);
            let sq = q.sqrt();
            let norm = 2.0 * sq;
            r[i] = g / norm;
            if let Some(j) = jac.as_deref_mut() {
                let (qu, qv) = (2.0 * u / a4, 2.0 * v / b4);
                for k in 0..j.ncols() {
                    let mut dq = qu * du[k] + qv * dv[k];
                    if k == 2 {
                        dq = -4.0 * u * u / (a4 * a);
                    } else if k == 3 {
                        dq = -4.0 * v * v / (b4 * b);
                    }
                    let dnorm = dq / sq;
                    j[(i, k)] = (dg[k] * norm - g * dnorm) / (norm * norm);
                }
            }
        }
        r
    }
}

/// Fits an axis-aligned half-ellipse to the boundary vertices strictly below
/// the widest horizontal chord, by Levenberg–Marquardt on the implicit-equation
/// residual (Sampson-normalized by default).
pub fn fit_half_ellipse(boundary: &[(f64, f64)]) -> Result<HalfEllipse> {
    fit_half_ellipse_with(boundary, &FitOptions::default())
}

pub fn fit_half_ellipse_with(boundary: &[(f64, f64)], opts: &FitOptions) -> Result<HalfEllipse> {
    if boundary.len() < 8 {
        return Err(Error::FitFailed(format!("{} boundary vertices, need at least 8", boundary.len())));
    }
    if boundary.iter().any(|p| !(p.0.is_finite() && p.1.is_finite())) {
        return Err(Error::NonFinite("boundary vertex".into()));
    }
    let (chord_y, x0, x1) = widest_chord(boundary).ok_or_else(|| Error::FitFailed("no horizontal chord".into()))?;
    let below: Vec<(f64, f64)> = boundary.iter().copied().filter(|p| p.1 > chord_y).collect();
    if below.len() < 4 {
        return Err(Error::FitFailed(format!("{} bottom-arc points, need at least 4", below.len())));
    }
    let depth = below.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max) - chord_y;
    let half_width = 0.5 * (x1 - x0);
    if half_width <= 0.0 || depth <= 0.0 {
        return Err(Error::FitFailed("degenerate chord".into()));
    }

    let np = if opts.rotated { 5 } else { 4 };
    let mut p = DVector::from_vec(vec![0.5 * (x0 + x1), chord_y, half_width, depth, 0.0]);
    p = p.rows(0, np).into_owned();
    let problem = Problem { pts: &below, rotated: opts.rotated, sampson: opts.residual == Residual::Sampson };
    let mut jac = DMatrix::zeros(below.len(), np);
    let mut r = problem.residuals(&p, Some(&mut jac));
    let mut cost = r.norm_squared();
    let mut mu = 1e-3;
    let mut converged = cost == 0.0;
    for _ in 0..opts.max_iterations {
        if converged {
            break;
        }
        if opts.center_on_chord {
            jac.column_mut(1).fill(0.0);
        }
        let jt = jac.transpose();
        let a = &jt * &jac;
        let g = &jt * &r;
        loop {
            let mut damped = a.clone();
            for k in 0..np {
                damped[(k, k)] += mu * a[(k, k)].max(1e-12);
            }
            let Some(step) = damped.lu().solve(&(-&g)) else {
                mu *= 10.0;
                if mu > 1e20 {
                    return Err(Error::FitFailed("singular normal equations".into()));
                }
                continue;
            };
            let trial = &p + &step;
            if trial[2] > 0.0 && trial[3] > 0.0 {
                let rt = problem.residuals(&trial, None);
                let ct = rt.norm_squared();
                if ct.is_finite() && ct <= cost {
                    let small_step = step.norm() <= 1e-12 * (p.norm() + 1e-12);
                    let small_gain = cost - ct <= 1e-15 * cost;
                    p = trial;
                    r = problem.residuals(&p, Some(&mut jac));
                    cost = ct;
                    mu = (mu / 10.0).max(1e-15);
                    converged = small_step || small_gain || cost == 0.0;
                    break;
                }
            }
            mu *= 10.0;
            if mu > 1e20 {
                // no descent direction left: stationary up to rounding
                converged = true;
                break;
            }
        }
    }
    if !converged {
        return Err(Error::FitFailed(format!("no convergence within {} iterations", opts.max_iterations)));
    }
    let (a, b) = (p[2], p[3]);
    if !(a > 0.0 && b > 0.0 && p.iter().all(|v| v.is_finite())) {
        return Err(Error::FitFailed("non-positive semi-axis".into()));
    }
    Ok(HalfEllipse {
        cx: p[0],
        cy: p[1],
        a,
        b,
        theta: if opts.rotated { p[4] } else { 0.0 },
        residual: (cost / below.len() as f64).sqrt(),
        points_used: below.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn arc(cx: f64, cy: f64, a: f64, b: f64, n: usize) -> Vec<(f64, f64)> {
        (0..n).map(|i| {
            let t = PI * i as f64 / (n - 1) as f64;
            (cx + a * t.cos(), cy + b * t.sin())
        })
        .collect()
    }

    #[test]
    fn chord_of_rectangle_prefers_top() {
        let rect = [(0.0, 0.0), (4.0, 0.0), (4.0, 3.0), (0.0, 3.0)];
        assert_eq!(widest_chord(&rect), Some((0.0, 0.0, 4.0)));
    }

    #[test]
    fn chord_of_diamond_is_the_waist() {
        let d = [(0.0, -2.0), (3.0, 0.0), (0.0, 2.0), (-3.0, 0.0)];
        assert_eq!(widest_chord(&d), Some((0.0, -3.0, 3.0)));
    }

    #[test]
    fn recovers_noiseless_half_ellipse() {
        let e = fit_half_ellipse(&arc(100.0, 50.0, 40.0, 20.0, 64)).unwrap();
        assert!((e.a / 40.0 - 1.0).abs() < 1e-6);
        assert!((e.b / 20.0 - 1.0).abs() < 1e-6);
        assert!((e.cx - 100.0).abs() < 1e-6 && (e.cy - 50.0).abs() < 1e-6);
        assert!(e.residual < 1e-9);
    }

    #[test]
    fn recovers_semicircle() {
        let e = fit_half_ellipse(&arc(0.0, 0.0, 25.0, 25.0, 48)).unwrap();
        assert!((e.a - e.b).abs() / 25.0 < 1e-6);
    }

    #[test]
    fn rotated_fit_agrees_on_aligned_data() {
        let opts = FitOptions { rotated: true, ..Default::default() };
        let e = fit_half_ellipse_with(&arc(10.0, 5.0, 30.0, 12.0, 64), &opts).unwrap();
        assert!((e.a / 30.0 - 1.0).abs() < 1e-6 && (e.b / 12.0 - 1.0).abs() < 1e-6);
        assert!(e.theta.abs() < 1e-6);
    }

    #[test]
    fn algebraic_residual_recovers_noiseless_arc() {
        let opts = FitOptions { residual: Residual::Algebraic, ..Default::default() };
        let e = fit_half_ellipse_with(&arc(3.0, 4.0, 40.0, 20.0, 64), &opts).unwrap();
        assert!((e.a / 40.0 - 1.0).abs() < 1e-6 && (e.b / 20.0 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn sampson_jacobian_matches_differences() {
        let pts = [(1.0, 7.0), (-3.0, 2.5), (4.0, 9.0)];
        for rotated in [false, true] {
            let prob = Problem { pts: &pts, rotated, sampson: true };
            let p = DVector::from_vec(vec![0.3, -0.2, 5.0, 8.0, 0.1]).rows(0, if rotated { 5 } else { 4 }).into_owned();
            let mut j = DMatrix::zeros(3, p.len());
            prob.residuals(&p, Some(&mut j));
            for k in 0..p.len() {
                let h = 1e-6;
                let (mut up, mut dn) = (p.clone(), p.clone());
                up[k] += h;
                dn[k] -= h;
                let fd = (prob.residuals(&up, None) - prob.residuals(&dn, None)) / (2.0 * h);
                for i in 0..3 {
                    assert!((fd[i] - j[(i, k)]).abs() < 1e-7, "param {k} row {i}: {} vs {}", fd[i], j[(i, k)]);
                }
            }
        }
    }

    #[test]
    fn too_few_points() {
        assert!(matches!(fit_half_ellipse(&arc(0.0, 0.0, 5.0, 5.0, 5)), Err(Error::FitFailed(_))));
        // a flat polygon has nothing below its widest chord
        let flat: Vec<_> = (0..10).map(|i| (i as f64, 0.0)).collect();
        assert!(matches!(fit_half_ellipse(&flat), Err(Error::FitFailed(_))));
    }
}
