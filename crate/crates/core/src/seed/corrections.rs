//! Expert correction points applied to a binary interior mask.
//!
//! A *merge* point removes the wall that wrongly separates two regions; a
//! *split* point draws a straight one-pixel cut that divides a region that
//! wrongly spans two pools. Region counts are in 4-connectivity; cuts are
//! 8-connected lines, so they block 4-connected foreground.

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::BinaryMask;
use crate::error::{Error, Result};
use crate::labeling::{label_components, Connectivity, Labels};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrectionKind {
    /// The region covers more than one pool.
    Split,
    /// The pool was dissected into several regions.
    Merge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionPoint {
    pub kind: CorrectionKind,
    pub x: i64,
    pub y: i64,
    pub author: String,
    pub created_at: DateTime<Utc>,
    #[serde(default)]
    pub image_id: String,
}

impl CorrectionPoint {
    pub fn new(kind: CorrectionKind, x: i64, y: i64) -> Self {
        Self { kind, x, y, author: String::new(), created_at: Utc::now(), image_id: String::new() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrectionConfig {
    /// How far from a merge point the separating wall may be.
    pub merge_radius: usize,
    /// Number of cut orientations tried for a split, spread over 180°.
    pub split_directions: usize,
}

impl Default for CorrectionConfig {
    fn default() -> Self {
        Self { merge_radius: 15, split_directions: 90 }
    }
}

/// Applies `points` in creation order (stable for equal timestamps).
pub fn apply_corrections(
    mask: &BinaryMask,
    points: &[CorrectionPoint],
    cfg: &CorrectionConfig,
) -> Result<BinaryMask> {
    let (w, h) = (mask.width, mask.height);
    for p in points {
        if p.x < 0 || p.y < 0 || p.x >= w as i64 || p.y >= h as i64 {
            return Err(Error::PointOutOfBounds { x: p.x, y: p.y, width: w, height: h });
        }
    }
    let mut order: Vec<&CorrectionPoint> = points.iter().collect();
    order.sort_by_key(|p| p.created_at);
    let mut out = mask.clone();
    for p in order {
        let (x, y) = (p.x as usize, p.y as usize);
        match p.kind {
            CorrectionKind::Merge => merge_at(&mut out, x, y, cfg.merge_radius)?,
            CorrectionKind::Split => split_at(&mut out, x, y, cfg.split_directions)?,
        }
    }
    Ok(out)
}

fn labels_of(mask: &BinaryMask) -> Labels {
    label_components(mask.width, mask.height, Connectivity::Four, |x, y| mask.get(x, y))
}

/// Walks from `(x, y)` along `(dx, dy)` over background; returns the run and
/// the label of the foreground pixel that ends it.
fn walk_background(
    mask: &BinaryMask,
    labels: &Labels,
    (x, y): (usize, usize),
    (dx, dy): (i64, i64),
    max_len: usize,
) -> Option<(Vec<(usize, usize)>, u32)> {
    let mut run = Vec::new();
    let (mut cx, mut cy) = (x as i64 + dx, y as i64 + dy);
    for _ in 0..max_len {
        if cx < 0 || cy < 0 || cx >= mask.width as i64 || cy >= mask.height as i64 {
            return None;
        }
        let (ux, uy) = (cx as usize, cy as usize);
        if mask.get(ux, uy) {
            return Some((run, labels.get(ux, uy)));
        }
        run.push((ux, uy));
        cx += dx;
        cy += dy;
    }
    None
}

fn merge_at(mask: &mut BinaryMask, px: usize, py: usize, radius: usize) -> Result<()> {
    let labels = labels_of(mask);
    let (w, h) = (mask.width, mask.height);
    let r = radius as i64;
    let mut candidates = Vec::new();
    for y in (py as i64 - r).max(0)..=(py as i64 + r).min(h as i64 - 1) {
        for x in (px as i64 - r).max(0)..=(px as i64 + r).min(w as i64 - 1) {
            let d2 = (x - px as i64).pow(2) + (y - py as i64).pow(2);
            if d2 <= r * r && !mask.get(x as usize, y as usize) {
                candidates.push((d2, y as usize, x as usize));
            }
        }
    }
    candidates.sort_unstable();

    for (_, y, x) in candidates {
        let mut best: Option<Vec<(usize, usize)>> = None;
        for dir in [(1i64, 0i64), (0, 1)] {
            let fwd = walk_background(mask, &labels, (x, y), dir, 2 * radius + 1);
            let back = walk_background(mask, &labels, (x, y), (-dir.0, -dir.1), 2 * radius + 1);
            let (Some((mut run, la)), Some((run_b, lb))) = (fwd, back) else { continue };
            if la == lb {
                continue;
            }
            run.push((x, y));
            run.extend(run_b);
            // the erased run may only touch the two regions it joins
            let touches_other = run.iter().any(|&(rx, ry)| {
                Connectivity::Four.offsets().iter().any(|&(ox, oy)| {
                    let (nx, ny) = (rx as i64 + ox, ry as i64 + oy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        return false;
                    }
                    let l = labels.get(nx as usize, ny as usize);
                    l != 0 && l != la && l != lb
                })
            });
            if touches_other {
                continue;
            }
            if best.as_ref().is_none_or(|b| run.len() < b.len()) {
                best = Some(run);
            }
        }
        if let Some(run) = best {
            for (rx, ry) in run {
                mask.set(rx, ry, true);
            }
            return Ok(());
        }
    }
    Err(Error::NoSeparatingBoundary { x: px, y: py, radius })
}

/// Region pixels crossed by the ray from `(px, py)` along `(ux, uy)` until it
/// leaves the region, and the distance travelled.
fn ray_in_region(labels: &Labels, (px, py): (usize, usize), (ux, uy): (f64, f64), label: u32) -> (Vec<(usize, usize)>, f64) {
    const STEP: f64 = 0.25;
    let mut pixels = Vec::new();
    let mut t = 0.0;
    loop {
        let x = (px as f64 + t * ux).round();
        let y = (py as f64 + t * uy).round();
        if x < 0.0 || y < 0.0 || x >= labels.width as f64 || y >= labels.height as f64 {
            return (pixels, t);
        }
        let (x, y) = (x as usize, y as usize);
        if labels.get(x, y) != label {
            return (pixels, t);
        }
        if pixels.last() != Some(&(x, y)) {
            pixels.push((x, y));
        }
        t += STEP;
    }
}

fn split_at(mask: &mut BinaryMask, px: usize, py: usize, directions: usize) -> Result<()> {
    if !mask.get(px, py) {
        return Err(Error::SplitOutsideRegion { x: px, y: py });
    }
    let labels = labels_of(mask);
    let label = labels.get(px, py);

    let mut chords: Vec<(f64, usize, Vec<(usize, usize)>)> = (0..directions.max(1))
        .map(|k| {
            let theta = std::f64::consts::PI * k as f64 / directions.max(1) as f64;
            let u = (theta.cos(), theta.sin());
            let (mut a, ta) = ray_in_region(&labels, (px, py), u, label);
            let (b, tb) = ray_in_region(&labels, (px, py), (-u.0, -u.1), label);
            a.extend(b);
            (ta + tb, k, a)
        })
        .collect();
    chords.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    for (_, _, cut) in chords {
        let mut trial = mask.clone();
        for &(x, y) in &cut {
            trial.set(x, y, false);
        }
        let pieces = label_components(trial.width, trial.height, Connectivity::Four, |x, y| {
            trial.get(x, y) && labels.get(x, y) == label
        });
        if pieces.count == 2 {
            *mask = trial;
            return Ok(());
        }
    }
    Err(Error::SplitNotPossible { x: px, y: py })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent 4-connected region count by explicit stack flood fill.
    fn flood_count(m: &BinaryMask) -> usize {
        let mut seen = vec![false; m.width * m.height];
        let mut count = 0;
        for s in 0..m.data.len() {
            if m.data[s] == 0 || seen[s] {
                continue;
            }
            count += 1;
            let mut stack = vec![s];
            seen[s] = true;
            while let Some(i) = stack.pop() {
                let (x, y) = (i % m.width, i / m.width);
                let mut push = |j: usize| {
                    if m.data[j] != 0 && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                };
                if x > 0 { push(i - 1); }
                if x + 1 < m.width { push(i + 1); }
                if y > 0 { push(i - m.width); }
                if y + 1 < m.height { push(i + m.width); }
            }
        }
        count
    }

    fn point(kind: CorrectionKind, x: i64, y: i64) -> CorrectionPoint {
        CorrectionPoint::new(kind, x, y)
    }

    #[test]
    fn no_points_is_identity() {
        let m = BinaryMask::from_fn(10, 10, |x, _| x % 3 != 0);
        assert_eq!(apply_corrections(&m, &[], &CorrectionConfig::default()).unwrap(), m);
    }

    #[test]
    fn merge_removes_shared_wall() {
        // two rectangles separated by a 2-pixel wall at x = 10..12
        let m = BinaryMask::from_fn(24, 12, |x, y| (1..11).contains(&y) && (1..22).contains(&x) && !(10..12).contains(&x));
        assert_eq!(flood_count(&m), 2);
        let out = apply_corrections(&m, &[point(CorrectionKind::Merge, 10, 5)], &CorrectionConfig::default()).unwrap();
        assert_eq!(flood_count(&out), 1);
        // only two wall pixels erased
        assert_eq!(out.count_ones(), m.count_ones() + 2);
    }

    #[test]
    fn merge_without_wall_errors() {
        let m = BinaryMask::from_fn(40, 10, |x, _| x < 5);
        let err = apply_corrections(&m, &[point(CorrectionKind::Merge, 35, 5)], &CorrectionConfig::default());
        assert!(matches!(err, Err(Error::NoSeparatingBoundary { .. })));
    }

    #[test]
    fn split_dumbbell_neck() {
        let m = BinaryMask::from_fn(40, 20, |x, y| {
            let d1 = (x as f64 - 9.0).powi(2) + (y as f64 - 10.0).powi(2);
            let d2 = (x as f64 - 30.0).powi(2) + (y as f64 - 10.0).powi(2);
            d1 <= 49.0 || d2 <= 49.0 || ((9..31).contains(&x) && (9..12).contains(&y))
        });
        assert_eq!(flood_count(&m), 1);
        let out = apply_corrections(&m, &[point(CorrectionKind::Split, 20, 10)], &CorrectionConfig::default()).unwrap();
        assert_eq!(flood_count(&out), 2);
        // the cut is vertical through the 3-pixel neck
        assert_eq!(m.count_ones() - out.count_ones(), 3);
    }

    #[test]
    fn split_on_background_errors() {
        let m = BinaryMask::from_fn(10, 10, |x, _| x < 5);
        let err = apply_corrections(&m, &[point(CorrectionKind::Split, 8, 3)], &CorrectionConfig::default());
        assert!(matches!(err, Err(Error::SplitOutsideRegion { x: 8, y: 3 })));
    }

    #[test]
    fn out_of_bounds_point_rejected() {
        let m = BinaryMask::new(10, 10);
        let err = apply_corrections(&m, &[point(CorrectionKind::Split, 10, 3)], &CorrectionConfig::default());
        assert!(matches!(err, Err(Error::PointOutOfBounds { .. })));
    }

    #[test]
    fn points_applied_in_creation_order() {
        // merging first then splitting at the same spot restores two regions;
        // the reverse order would fail because the split point is on the wall
        let m = BinaryMask::from_fn(24, 12, |x, y| (1..11).contains(&y) && (1..22).contains(&x) && x != 11);
        let t0 = Utc::now();
        let mut split = point(CorrectionKind::Split, 11, 5);
        split.created_at = t0 + chrono::Duration::seconds(1);
        let mut merge = point(CorrectionKind::Merge, 11, 5);
        merge.created_at = t0;
        let out = apply_corrections(&m, &[split, merge], &CorrectionConfig::default()).unwrap();
        assert_eq!(flood_count(&out), 2);
    }

    #[test]
    fn json_record_shape() {
        let p = CorrectionPoint {
            kind: CorrectionKind::Merge,
            x: 3,
            y: 4,
            author: "op".into(),
            created_at: "2024-01-02T03:04:05Z".parse().unwrap(),
            image_id: "img-1".into(),
        };
        let v: serde_json::Value = serde_json::to_value(&p).unwrap();
        assert_eq!(v["kind"], "merge");
        assert_eq!(v["x"], 3);
        assert_eq!(v["image_id"], "img-1");
        let back: CorrectionPoint = serde_json::from_value(v).unwrap();
        assert_eq!(back, p);
    }
}
