//! Topological border following over 8-connected foreground.
//!
//! Implements the Suzuki–Abe raster scan: every outer border and every hole
//! border is traced once, and the border that encloses it is recorded as its
//! parent.

use super::BinaryMask;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Contour {
    /// Border pixels `(x, y)` in tracing order; the polygon closes back to the first.
    pub points: Vec<(usize, usize)>,
    /// True for the border of a hole inside a foreground component.
    pub is_hole: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ContourSet {
    pub contours: Vec<Contour>,
    /// Index of the enclosing contour, `-1` for outermost borders.
    pub hierarchy: Vec<i64>,
}

impl ContourSet {
    pub fn len(&self) -> usize {
        self.contours.len()
    }

    pub fn is_empty(&self) -> bool {
        self.contours.is_empty()
    }

    pub fn children(&self, idx: usize) -> impl Iterator<Item = usize> + '_ {
        self.hierarchy.iter().enumerate().filter(move |(_, &p)| p == idx as i64).map(|(i, _)| i)
    }
}

// Neighbor offsets (drow, dcol) in counter-clockwise order starting east.
const DIRS: [(i64, i64); 8] = [(0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1), (1, 0), (1, 1)];

fn dir_index(dr: i64, dc: i64) -> usize {
    DIRS.iter().position(|&d| d == (dr, dc)).expect("neighbor offset")
}

pub fn extract_contours(mask: &BinaryMask) -> ContourSet {
    let (w, h) = (mask.width as i64, mask.height as i64);
    // zero frame around the image so tracing never leaves the grid
    let (pw, ph) = (w + 2, h + 2);
    let mut f = vec![0i64; (pw * ph) as usize];
    for y in 0..h {
        for x in 0..w {
            if mask.get(x as usize, y as usize) {
                f[((y + 1) * pw + x + 1) as usize] = 1;
            }
        }
    }
    let at = |r: i64, c: i64| (r * pw + c) as usize;

    // border number 1 is the frame, treated as a hole border
    let mut is_hole_of = vec![true, true];
    let mut parent_of: Vec<i64> = vec![-1, -1];
    let mut contours: Vec<Contour> = Vec::new();
    let mut nbd: i64 = 1;

    for r in 1..ph - 1 {
        let mut lnbd: i64 = 1;
        for c in 1..pw - 1 {
            let v = f[at(r, c)];
            if v == 0 {
                continue;
            }
            let start = if v == 1 && f[at(r, c - 1)] == 0 {
                Some((false, (r, c - 1)))
            } else if v >= 1 && f[at(r, c + 1)] == 0 {
                if v > 1 {
                    lnbd = v;
                }
                Some((true, (r, c + 1)))
            } else {
                None
            };

            if let Some((hole, from)) = start {
                nbd += 1;
                let lnbd_hole = is_hole_of[lnbd as usize];
                let parent = if hole == lnbd_hole { parent_of[lnbd as usize] } else { lnbd };
                is_hole_of.push(hole);
                parent_of.push(parent);

                let points = follow_border(&mut f, pw, (r, c), from, nbd);
                contours.push(Contour {
                    points: points.into_iter().map(|(pr, pc)| ((pc - 1) as usize, (pr - 1) as usize)).collect(),
                    is_hole: hole,
                });
            }

            let v = f[at(r, c)];
            if v != 1 {
                lnbd = v.abs();
            }
        }
    }

    // border numbers start at 2 for the first traced contour
    let hierarchy = (0..contours.len()).map(|i| {
        let p = parent_of[i + 2];
        if p <= 1 { -1 } else { p - 2 }
    });
    ContourSet { hierarchy: hierarchy.collect(), contours }
}

fn follow_border(f: &mut [i64], pw: i64, start: (i64, i64), from: (i64, i64), nbd: i64) -> Vec<(i64, i64)> {
    let at = |r: i64, c: i64| (r * pw + c) as usize;
    let (r0, c0) = start;

    // clockwise search around the start pixel, beginning at `from`
    let d0 = dir_index(from.0 - r0, from.1 - c0);
    let mut first = None;
    for k in 0..8 {
        let d = (d0 + 8 - k) % 8;
        let (nr, nc) = (r0 + DIRS[d].0, c0 + DIRS[d].1);
        if f[at(nr, nc)] != 0 {
            first = Some((nr, nc));
            break;
        }
    }
    let Some((r1, c1)) = first else {
        f[at(r0, c0)] = -nbd;
        return vec![(r0, c0)];
    };

    let mut points = Vec::new();
    let (mut r2, mut c2) = (r1, c1);
    let (mut r3, mut c3) = (r0, c0);
    loop {
        points.push((r3, c3));
        // counter-clockwise search around (r3, c3), starting after (r2, c2)
        let d_prev = dir_index(r2 - r3, c2 - c3);
        let mut east_zero_examined = false;
        let mut next = (r3, c3);
        for k in 1..=8 {
            let d = (d_prev + k) % 8;
            let (nr, nc) = (r3 + DIRS[d].0, c3 + DIRS[d].1);
            if f[at(nr, nc)] != 0 {
                next = (nr, nc);
                break;
            }
            if d == 0 {
                east_zero_examined = true;
            }
        }
        if east_zero_examined {
            f[at(r3, c3)] = -nbd;
        } else if f[at(r3, c3)] == 1 {
            f[at(r3, c3)] = nbd;
        }
        if next == (r0, c0) && (r3, c3) == (r1, c1) {
            break;
        }
        (r2, c2) = (r3, c3);
        (r3, c3) = next;
    }
    points
}

/// Rasterizes a closed pixel polygon: its vertices plus every pixel whose
/// center lies inside by the even-odd rule.
pub fn fill_contour(points: &[(usize, usize)], width: usize, height: usize) -> BinaryMask {
    let mut mask = BinaryMask::new(width, height);
    if points.is_empty() {
        return mask;
    }
    let n = points.len();
    for y in 0..height {
        let yc = y as f64;
        let mut xs: Vec<f64> = Vec::new();
        for i in 0..n {
            let (ax, ay) = (points[i].0 as f64, points[i].1 as f64);
            let (bx, by) = (points[(i + 1) % n].0 as f64, points[(i + 1) % n].1 as f64);
            // half-open rule on the edge's y-span
            if (ay <= yc && by > yc) || (by <= yc && ay > yc) {
                xs.push(ax + (yc - ay) * (bx - ax) / (by - ay));
            }
        }
        xs.sort_by(f64::total_cmp);
        for pair in xs.chunks_exact(2) {
            let x0 = pair[0].ceil().max(0.0) as usize;
            let x1 = pair[1].floor().min(width as f64 - 1.0);
            if x1 < 0.0 {
                continue;
            }
            for x in x0..=x1 as usize {
                mask.set(x, y, true);
            }
        }
    }
    for &(x, y) in points {
        if x < width && y < height {
            mask.set(x, y, true);
        }
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labeling::{label_components, Connectivity};

    fn square(size: usize, at: usize, side: usize) -> BinaryMask {
        BinaryMask::from_fn(size, size, |x, y| (at..at + side).contains(&x) && (at..at + side).contains(&y))
    }

    /// Foreground pixels with a 4-neighbor in the background (or outside the image).
    fn boundary_pixels(mask: &BinaryMask) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for y in 0..mask.height {
            for x in 0..mask.width {
                if !mask.get(x, y) {
                    continue;
                }
                let bg = |dx: i64, dy: i64| {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    nx < 0 || ny < 0 || nx >= mask.width as i64 || ny >= mask.height as i64 || !mask.get(nx as usize, ny as usize)
                };
                if bg(1, 0) || bg(-1, 0) || bg(0, 1) || bg(0, -1) {
                    out.push((x, y));
                }
            }
        }
        out
    }

    #[test]
    fn filled_square_has_36_boundary_pixels() {
        let m = square(20, 5, 10);
        let cs = extract_contours(&m);
        assert_eq!(cs.len(), 1);
        assert_eq!(cs.hierarchy, vec![-1]);
        assert_eq!(cs.contours[0].points.len(), 36);
        let mut traced = cs.contours[0].points.clone();
        traced.sort();
        let mut brute = boundary_pixels(&m);
        brute.sort();
        assert_eq!(traced, brute);
    }

    #[test]
    fn empty_mask_has_no_contours() {
        assert!(extract_contours(&BinaryMask::new(8, 8)).is_empty());
    }

    #[test]
    fn two_blobs_two_outer_contours() {
        let m = BinaryMask::from_fn(20, 10, |x, y| (2..6).contains(&y) && ((1..5).contains(&x) || (10..15).contains(&x)));
        let cs = extract_contours(&m);
        assert_eq!(cs.len(), 2);
        assert!(cs.contours.iter().all(|c| !c.is_hole));
        assert_eq!(cs.hierarchy, vec![-1, -1]);
    }

    #[test]
    fn single_pixel_contour() {
        let mut m = BinaryMask::new(5, 5);
        m.set(2, 2, true);
        let cs = extract_contours(&m);
        assert_eq!(cs.contours[0].points, vec![(2, 2)]);
    }

    #[test]
    fn annulus_has_hole_child() {
        let m = BinaryMask::from_fn(30, 30, |x, y| {
            let d2 = (x as f64 - 15.0).powi(2) + (y as f64 - 15.0).powi(2);
            (36.0..=144.0).contains(&d2)
        });
        let cs = extract_contours(&m);
        assert_eq!(cs.len(), 2);
        assert_eq!(cs.hierarchy, vec![-1, 0]);
        assert!(cs.contours[1].is_hole);
        assert_eq!(cs.children(0).collect::<Vec<_>>(), vec![1]);
        // the hole encloses exactly the background component not reachable from the border
        let bg = label_components(30, 30, Connectivity::Four, |x, y| !m.get(x, y));
        assert_eq!(bg.touches_border().iter().filter(|t| !**t).count(), 1);
    }

    #[test]
    fn blob_inside_hole_nests_three_deep() {
        let m = BinaryMask::from_fn(30, 30, |x, y| {
            let d2 = (x as f64 - 15.0).powi(2) + (y as f64 - 15.0).powi(2);
            (64.0..=169.0).contains(&d2) || d2 <= 4.0
        });
        let cs = extract_contours(&m);
        assert_eq!(cs.len(), 3);
        assert_eq!(cs.hierarchy, vec![-1, 0, 1]);
        assert!(!cs.contours[2].is_hole);
    }

    fn cyclic_eq(a: &[(usize, usize)], b: &[(usize, usize)]) -> bool {
        a.len() == b.len() && (0..a.len()).any(|s| (0..a.len()).all(|i| a[(i + s) % a.len()] == b[i]))
    }

    #[test]
    fn contour_fill_contour_identity() {
        let shapes: Vec<BinaryMask> = vec![
            square(16, 3, 7),
            BinaryMask::from_fn(24, 24, |x, y| (x as f64 - 11.0).powi(2) + (y as f64 - 12.0).powi(2) <= 64.0),
            BinaryMask::from_fn(20, 20, |x, y| (2..15).contains(&x) && (2..6).contains(&y) || (2..6).contains(&x) && (2..17).contains(&y)),
            BinaryMask::from_fn(20, 20, |x, y| y >= 3 && y <= 15 && x >= 2 + (y - 3) / 2 && x <= 17 - (y - 3) / 2),
        ];
        for m in shapes {
            let cs = extract_contours(&m);
            assert_eq!(cs.len(), 1);
            let filled = fill_contour(&cs.contours[0].points, m.width, m.height);
            assert_eq!(filled, m);
            let again = extract_contours(&filled);
            assert!(cyclic_eq(&again.contours[0].points, &cs.contours[0].points));
        }
    }
}
