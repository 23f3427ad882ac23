//! Procedural etched-section scenes with exact ground truth.
//!
//! Layers of half-ellipse pools are painted bottom-up, so later layers
//! overwrite the tops of earlier ones. Walls between different pools are
//! drawn one pixel thick, dark defect disks are stamped on top, and speckle
//! noise is added to the intensity image only after the mask is final.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{AnnotationMask, MaskClass, RawImage};
use crate::labeling::{label_components, Connectivity};

/// Gray levels used when rendering.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntensityPalette {
    pub interior: f64,
    pub boundary: f64,
    pub defect: f64,
    /// Darkening applied to interior pixels touching a wall.
    pub arc_darkening: f64,
}

impl Default for IntensityPalette {
    fn default() -> Self {
        Self { interior: 200.0, boundary: 70.0, defect: 20.0, arc_darkening: 40.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub layers: usize,
    /// Horizontal distance between track centers, px.
    pub hatch_spacing: f64,
    /// Full pool width range `2a`, px.
    pub pool_width: (f64, f64),
    /// Pool depth range `b`, px.
    pub pool_depth: (f64, f64),
    /// Scan rotation between layers, degrees.
    pub rotation_deg: f64,
    pub defect_count: usize,
    pub defect_radius: (f64, f64),
    /// Standard deviation of the additive speckle, gray levels.
    pub noise_amplitude: f64,
    pub palette: IntensityPalette,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            width: 256,
            height: 256,
            layers: 6,
            hatch_spacing: 36.0,
            pool_width: (40.0, 60.0),
            pool_depth: (24.0, 36.0),
            rotation_deg: 67.0,
            defect_count: 3,
            defect_radius: (2.0, 4.0),
            noise_amplitude: 8.0,
            palette: IntensityPalette::default(),
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let range_ok = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo > 0.0 && hi >= lo;
        if !range_ok(self.pool_width) || !range_ok(self.pool_depth) || !range_ok(self.defect_radius) {
            return Err(Error::InvalidArgument("scene ranges must be positive and ordered".into()));
        }
        if !(self.hatch_spacing.is_finite() && self.hatch_spacing > 0.0) || self.layers == 0 {
            return Err(Error::InvalidArgument("hatch spacing and layer count must be positive".into()));
        }
        if !(self.noise_amplitude.is_finite() && self.noise_amplitude >= 0.0) || !self.rotation_deg.is_finite() {
            return Err(Error::InvalidArgument("noise amplitude and rotation must be finite".into()));
        }
        if (self.width as f64) < self.pool_width.1 + 2.0 || (self.height as f64) < self.pool_depth.1 + 2.0 {
            return Err(Error::InvalidArgument(format!(
                "{}x{} canvas too small for one {}x{} pool",
                self.width, self.height, self.pool_width.1, self.pool_depth.1
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruePool {
    pub id: usize,
    pub layer: usize,
    pub cx: f64,
    /// Surface line the pool hangs from (image rows grow downward).
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    pub visible_area: usize,
    pub touches_edge: bool,
    /// Some of the pool's in-canvas pixels were taken by later pools or defects.
    pub overdrawn: bool,
}

/// Disk covering the pixels whose centers `(x + 0.5, y + 0.5)` lie within `radius`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueDefect {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// Visible pools only.
    pub pools: Vec<TruePool>,
    pub defects: Vec<TrueDefect>,
    #[serde(skip)]
    pub mask: AnnotationMask,
}

const NONE: u32 = u32::MAX;
const DEFECT: u32 = u32::MAX - 1;

struct Track {
    layer: usize,
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
}

impl Track {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (u, v) = ((x - self.cx) / self.a, (y - self.cy) / self.b);
        y >= self.cy && u * u + v * v <= 1.0
    }
}

fn sample(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Renders a scene; the same spec always yields bit-identical output.
pub fn generate_scene(spec: &SceneSpec) -> Result<(RawImage, GroundTruth)> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // surfaces step up from below the canvas so the top layer sits at row 0
    let step = (h as f64 + spec.pool_depth.1 * 0.5) / spec.layers as f64;
    let mut tracks = Vec::new();
    for layer in 0..spec.layers {
        let surface = h as f64 + spec.pool_depth.1 * 0.5 - (layer + 1) as f64 * step;
        let angle = (layer as f64 * spec.rotation_deg).to_radians();
        // an oblique track cuts the section in a wider ellipse
        let stretch = (1.0 / angle.cos().abs().max(1e-9)).min(2.0);
        let spacing = spec.hatch_spacing * stretch;
        let mut cx = -rng.random_range(0.0..spacing);
        while cx - spec.pool_width.1 * stretch < w as f64 {
            let a = sample(&mut rng, spec.pool_width) * stretch / 2.0;
            let b = sample(&mut rng, spec.pool_depth);
            let jitter = rng.random_range(-0.1..0.1) * spacing;
            tracks.push(Track { layer, cx: cx + jitter, cy: surface, a, b });
            cx += spacing;
        }
    }

    let mut owner = vec![NONE; w * h];
    let mut full_area = vec![0usize; tracks.len()];
    for (i, t) in tracks.iter().enumerate() {
        let x0 = (t.cx - t.a).floor().max(0.0) as usize;
        let x1 = ((t.cx + t.a).ceil().max(0.0) as usize).min(w);
        let y0 = t.cy.floor().max(0.0) as usize;
        let y1 = ((t.cy + t.b).ceil().max(0.0) as usize).min(h);
        for y in y0..y1 {
            for x in x0..x1 {
                if t.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    owner[y * w + x] = i as u32;
                    full_area[i] += 1;
                }
            }
        }
    }

    let mut defects = Vec::with_capacity(spec.defect_count);
    for _ in 0..spec.defect_count {
        let r = sample(&mut rng, spec.defect_radius);
        let cx = rng.random_range(r..(w as f64 - r).max(r + 1e-9));
        let cy = rng.random_range(r..(h as f64 - r).max(r + 1e-9));
        for y in (cy - r).floor().max(0.0) as usize..((cy + r).ceil() as usize).min(h) {
            for x in (cx - r).floor().max(0.0) as usize..((cx + r).ceil() as usize).min(w) {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                if dx * dx + dy * dy <= r * r {
                    owner[y * w + x] = DEFECT;
                }
            }
        }
        defects.push(TrueDefect { cx, cy, radius: r });
    }

    let mut mask = AnnotationMask::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let o = owner[y * w + x];
            let class = match o {
                DEFECT => MaskClass::Defect,
                NONE => MaskClass::Boundary,
                _ => {
                    // the lower-indexed side of a pool-pool edge becomes the wall
                    let wall = [(1i64, 0i64), (-1, 0), (0, 1), (0, -1)].iter().any(|&(dx, dy)| {
                        let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                        if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                            return false;
                        }
                        let q = owner[ny as usize * w + nx as usize];
                        q < DEFECT && q != o && o < q
                    });
                    if wall {
                        MaskClass::Boundary
                    } else {
                        MaskClass::Background
                    }
                }
            };
            mask.set(x, y, class);
        }
    }

    // keep one interior component per pool; stray fragments become wall
    let labels = label_components(w, h, Connectivity::Four, |x, y| mask.get(x, y) == MaskClass::Background);
    let sizes = labels.sizes();
    let border = labels.touches_border();
    let mut best: Vec<Option<u32>> = vec![None; tracks.len()];
    let mut comp_owner = vec![NONE; labels.count];
    for y in 0..h {
        for x in 0..w {
            let l = labels.get(x, y);
            if l > 0 {
                comp_owner[l as usize - 1] = owner[y * w + x];
            }
        }
    }
    for (c, &o) in comp_owner.iter().enumerate() {
        let slot = &mut best[o as usize];
        if slot.is_none_or(|b| sizes[c] > sizes[b as usize - 1]) {
            *slot = Some(c as u32 + 1);
        }
    }
    for y in 0..h {
        for x in 0..w {
            let l = labels.get(x, y);
            if l > 0 && best[owner[y * w + x] as usize] != Some(l) {
                mask.set(x, y, MaskClass::Boundary);
            }
        }
    }

    let mut pools = Vec::new();
    for (i, t) in tracks.iter().enumerate() {
        if let Some(l) = best[i] {
            let c = l as usize - 1;
            pools.push(TruePool {
                id: i,
                layer: t.layer,
                cx: t.cx,
                cy: t.cy,
                a: t.a,
                b: t.b,
                visible_area: sizes[c],
                touches_edge: border[c],
                overdrawn: owner.iter().filter(|&&o| o == i as u32).count() < full_area[i],
            });
        }
    }

    let image = render(&mask, &spec.palette, spec.noise_amplitude, &mut rng)?;
    Ok((image, GroundTruth { pools, defects, mask }))
}

fn render(mask: &AnnotationMask, pal: &IntensityPalette, noise: f64, rng: &mut ChaCha8Rng) -> Result<RawImage> {
    let (w, h) = (mask.width, mask.height);
    let mut data = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let v = match mask.get(x, y) {
                MaskClass::Defect => pal.defect,
                MaskClass::Boundary => pal.boundary,
                MaskClass::Background => {
                    let near_wall = (-1i64..=1).any(|dy| {
                        (-1i64..=1).any(|dx| {
                            let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                            nx >= 0
                                && ny >= 0
                                && nx < w as i64
                                && ny < h as i64
                                && mask.get(nx as usize, ny as usize) != MaskClass::Background
                        })
                    });
                    pal.interior - if near_wall { pal.arc_darkening } else { 0.0 }
                }
            };
            data.push(v);
        }
    }
    if noise > 0.0 {
        let n = Normal::new(0.0, noise).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        for v in &mut data {
            *v = (*v + n.sample(rng)).clamp(0.0, 255.0);
        }
    }
    RawImage::new(w, h, 1, data)
}
