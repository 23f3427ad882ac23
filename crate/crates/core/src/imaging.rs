//! Image ingestion, tiling, resolution reduction, model value range and
//! class-mask overlays.

use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Intensity image with values in `[0, 255]`, row-major, interleaved channels.
#[derive(Debug, Clone, PartialEq)]
pub struct RawImage {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl RawImage {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidArgument(format!("{channels} channels (expected 1 or 3)")));
        }
        if data.len() != width * height * channels {
            return Err(Error::DimensionMismatch(format!(
                "{} values for {width}x{height}x{channels}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=255.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("intensity {v} outside [0, 255]")));
        }
        Ok(Self { width, height, channels, data })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self::new(width, height, channels, vec![value; width * height * channels])
            .expect("filled image is valid")
    }

    /// Builds a single-channel image by evaluating `f(x, y)`; values are clamped to `[0, 255]`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y).clamp(0.0, 255.0));
            }
        }
        Self { width, height, channels: 1, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Rec. 601 luminance; single-channel images are returned unchanged.
    pub fn luminance(&self) -> RawImage {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .data
            .chunks_exact(3)
            .map(|p| (0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]).clamp(0.0, 255.0))
            .collect();
        RawImage { width: self.width, height: self.height, channels: 1, data }
    }

    /// Copies the `width`×`height` window whose top-left corner is `(row, col)`.
    pub fn crop(&self, row: usize, col: usize, width: usize, height: usize) -> Result<RawImage> {
        if row + height > self.height || col + width > self.width {
            return Err(Error::DimensionMismatch(format!(
                "crop {width}x{height}@({row},{col}) outside {}x{}",
                self.width, self.height
            )));
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(width * height * c);
        for y in row..row + height {
            let start = (y * self.width + col) * c;
            data.extend_from_slice(&self.data[start..start + width * c]);
        }
        Ok(RawImage { width, height, channels: c, data })
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<RawImage> {
        let img = image::open(path.as_ref())?;
        Ok(match img.color().channel_count() {
            1 | 2 => {
                let g = img.to_luma8();
                let (w, h) = g.dimensions();
                let data = g.into_raw().into_iter().map(f64::from).collect();
                RawImage { width: w as usize, height: h as usize, channels: 1, data }
            }
            _ => {
                let rgb = img.to_rgb8();
                let (w, h) = rgb.dimensions();
                let data = rgb.into_raw().into_iter().map(f64::from).collect();
                RawImage { width: w as usize, height: h as usize, channels: 3, data }
            }
        })
    }

    /// Quantizes to 8 bits (round to nearest) and writes a grayscale or RGB PNG.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.to_u8();
        let (w, h) = (self.width as u32, self.height as u32);
        if self.channels == 1 {
            let buf: GrayImage = ImageBuffer::from_raw(w, h, bytes).expect("buffer size");
            buf.save(path.as_ref())?;
        } else {
            let buf: RgbImage = ImageBuffer::from_raw(w, h, bytes).expect("buffer size");
            buf.save(path.as_ref())?;
        }
        Ok(())
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let mut out = std::io::Cursor::new(Vec::new());
        let bytes = self.to_u8();
        let (w, h) = (self.width as u32, self.height as u32);
        if self.channels == 1 {
            let buf: GrayImage = ImageBuffer::from_raw(w, h, bytes).expect("buffer size");
            buf.write_to(&mut out, image::ImageFormat::Png)?;
        } else {
            let buf: RgbImage = ImageBuffer::from_raw(w, h, bytes).expect("buffer size");
            buf.write_to(&mut out, image::ImageFormat::Png)?;
        }
        Ok(out.into_inner())
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect()
    }
}

/// Square excerpt of a source image.
#[derive(Debug, Clone, PartialEq)]
pub struct Tile {
    pub source_id: String,
    /// `(row, col)` of the top-left pixel in the source.
    pub origin: (usize, usize),
    pub size: usize,
    pub image: RawImage,
}

/// Evenly spaced origins along one axis; the first is 0 and the last is `dim - tile`.
fn axis_origins(dim: usize, tile: usize, n: usize) -> Option<Vec<usize>> {
    if n == 1 {
        return (dim == tile).then(|| vec![0]);
    }
    let span = (dim - tile) as f64;
    let origins: Vec<usize> =
        (0..n).map(|k| (k as f64 * span / (n - 1) as f64).round() as usize).collect();
    // gaps between consecutive tiles leave pixels uncovered
    let covered = origins.windows(2).all(|w| w[1] - w[0] <= tile);
    covered.then_some(origins)
}

/// Cuts `img` into `rows × cols` square tiles with evenly spaced origins.
pub fn tile_image(
    img: &RawImage,
    source_id: &str,
    tile_size: usize,
    grid: (usize, usize),
) -> Result<Vec<Tile>> {
    let (rows, cols) = grid;
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidArgument("grid must be at least 1x1".into()));
    }
    if tile_size == 0 || tile_size > img.width.min(img.height) {
        return Err(Error::TileTooLarge { tile: tile_size, width: img.width, height: img.height });
    }
    let cover_err = || Error::GridCannotCover {
        rows,
        cols,
        tile: tile_size,
        width: img.width,
        height: img.height,
    };
    let row_origins = axis_origins(img.height, tile_size, rows).ok_or_else(cover_err)?;
    let col_origins = axis_origins(img.width, tile_size, cols).ok_or_else(cover_err)?;
    let mut tiles = Vec::with_capacity(rows * cols);
    for &r in &row_origins {
        for &c in &col_origins {
            tiles.push(Tile {
                source_id: source_id.to_string(),
                origin: (r, c),
                size: tile_size,
                image: img.crop(r, c, tile_size, tile_size)?,
            });
        }
    }
    Ok(tiles)
}

/// Box-filter reduction: each output pixel is the mean of a `factor × factor` block.
pub fn downscale(img: &RawImage, factor: usize) -> Result<RawImage> {
    if factor == 0 || img.width % factor != 0 || img.height % factor != 0 {
        return Err(Error::InvalidArgument(format!(
            "factor {factor} does not divide {}x{}",
            img.width, img.height
        )));
    }
    let (w, h, c) = (img.width / factor, img.height / factor, img.channels);
    let norm = (factor * factor) as f64;
    let mut data = vec![0.0; w * h * c];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for dy in 0..factor {
                    for dx in 0..factor {
                        acc += img.get(x * factor + dx, y * factor + dy, ch);
                    }
                }
                data[(y * w + x) * c + ch] = acc / norm;
            }
        }
    }
    RawImage::new(w, h, c, data)
}

/// Planar 3-channel image with values in `[-1, 1]`, the network's input/output domain.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelImage {
    pub height: usize,
    pub width: usize,
    /// Channel-major (`c, y, x`) storage, length `3 * height * width`.
    pub data: Vec<f64>,
}

impl ModelImage {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(Error::DimensionMismatch(format!(
                "{} values for 3x{height}x{width}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("model value {v} outside [-1, 1]")));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0.0; 3 * height * width] }
    }
}

/// Affine map `v / 127.5 - 1`; single-channel images are replicated to three channels.
pub fn to_model_range(img: &RawImage) -> ModelImage {
    let (w, h) = (img.width, img.height);
    let plane = w * h;
    let mut data = vec![0.0; 3 * plane];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let src = if img.channels == 1 { 0 } else { c };
                data[c * plane + y * w + x] = img.get(x, y, src) / 127.5 - 1.0;
            }
        }
    }
    ModelImage { height: h, width: w, data }
}

/// Inverse of [`to_model_range`]; returns an RGB image. Out-of-range values are clamped.
pub fn from_model_range(m: &ModelImage) -> RawImage {
    let plane = m.height * m.width;
    let mut data = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            data.push(((m.data[c * plane + i] + 1.0) * 127.5).clamp(0.0, 255.0));
        }
    }
    RawImage { width: m.width, height: m.height, channels: 3, data }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
#[repr(u8)]
pub enum MaskClass {
    Background = 0,
    Boundary = 1,
    Defect = 2,
}

impl MaskClass {
    pub const ALL: [MaskClass; 3] = [MaskClass::Background, MaskClass::Boundary, MaskClass::Defect];

    pub fn from_index(v: u8) -> Option<Self> {
        match v {
            0 => Some(MaskClass::Background),
            1 => Some(MaskClass::Boundary),
            2 => Some(MaskClass::Defect),
            _ => None,
        }
    }
}

/// Per-pixel class map.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AnnotationMask {
    pub width: usize,
    pub height: usize,
    pub classes: Vec<MaskClass>,
}

impl AnnotationMask {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, classes: vec![MaskClass::Background; width * height] }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> MaskClass {
        self.classes[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, class: MaskClass) {
        self.classes[y * self.width + x] = class;
    }

    pub fn count(&self, class: MaskClass) -> usize {
        self.classes.iter().filter(|&&c| c == class).count()
    }

    /// Majority-free reduction: a block takes the highest-priority class it
    /// contains (defect, then boundary, then background) so thin lines survive.
    pub fn downscale(&self, factor: usize) -> Result<AnnotationMask> {
        if factor == 0 || self.width % factor != 0 || self.height % factor != 0 {
            return Err(Error::InvalidArgument(format!(
                "factor {factor} does not divide {}x{}",
                self.width, self.height
            )));
        }
        let (w, h) = (self.width / factor, self.height / factor);
        let mut out = AnnotationMask::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let mut best = MaskClass::Background;
                for dy in 0..factor {
                    for dx in 0..factor {
                        let c = self.get(x * factor + dx, y * factor + dy);
                        if c == MaskClass::Defect || (c == MaskClass::Boundary && best == MaskClass::Background) {
                            best = c;
                        }
                    }
                }
                out.set(x, y, best);
            }
        }
        Ok(out)
    }

    pub fn crop(&self, row: usize, col: usize, width: usize, height: usize) -> Result<AnnotationMask> {
        if row + height > self.height || col + width > self.width {
            return Err(Error::DimensionMismatch("mask crop outside bounds".into()));
        }
        let mut classes = Vec::with_capacity(width * height);
        for y in row..row + height {
            classes.extend_from_slice(&self.classes[y * self.width + col..y * self.width + col + width]);
        }
        Ok(AnnotationMask { width, height, classes })
    }

    /// Stores class indices (0, 1, 2) as an 8-bit grayscale PNG.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_label_image().save(path.as_ref())?;
        Ok(())
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let mut out = std::io::Cursor::new(Vec::new());
        self.to_label_image().write_to(&mut out, image::ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    fn to_label_image(&self) -> GrayImage {
        ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([self.get(x as usize, y as usize) as u8])
        })
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<AnnotationMask> {
        let img = image::open(path.as_ref())?.to_luma8();
        Self::from_label_image(&img)
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<AnnotationMask> {
        let img = image::load_from_memory(bytes)?.to_luma8();
        Self::from_label_image(&img)
    }

    fn from_label_image(img: &GrayImage) -> Result<AnnotationMask> {
        let (w, h) = img.dimensions();
        let classes = img
            .pixels()
            .map(|p| {
                MaskClass::from_index(p.0[0])
                    .ok_or_else(|| Error::InvalidArgument(format!("label {} in mask PNG", p.0[0])))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(AnnotationMask { width: w as usize, height: h as usize, classes })
    }
}

/// RGB colors used to draw each mask class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassPalette {
    pub background: [u8; 3],
    pub boundary: [u8; 3],
    pub defect: [u8; 3],
}

impl Default for ClassPalette {
    /// Gray background, magenta boundaries, green defects.
    fn default() -> Self {
        Self { background: [128, 128, 128], boundary: [255, 0, 255], defect: [0, 255, 0] }
    }
}

impl ClassPalette {
    pub fn new(background: [u8; 3], boundary: [u8; 3], defect: [u8; 3]) -> Result<Self> {
        if background == boundary || background == defect || boundary == defect {
            return Err(Error::InvalidArgument("palette colors must be pairwise distinct".into()));
        }
        Ok(Self { background, boundary, defect })
    }

    pub fn color(&self, class: MaskClass) -> [u8; 3] {
        match class {
            MaskClass::Background => self.background,
            MaskClass::Boundary => self.boundary,
            MaskClass::Defect => self.defect,
        }
    }

    /// Squared distances from `rgb` to each palette entry, in [`MaskClass::ALL`] order.
    fn distances(&self, rgb: [f64; 3]) -> [f64; 3] {
        MaskClass::ALL.map(|class| {
            let p = self.color(class);
            (0..3).map(|c| (rgb[c] - f64::from(p[c])).powi(2)).sum()
        })
    }

    /// Nearest class; `None` when the two closest entries are equidistant.
    pub fn classify(&self, rgb: [f64; 3]) -> Option<MaskClass> {
        let d = self.distances(rgb);
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| d[a].total_cmp(&d[b]));
        (d[order[0]] < d[order[1]]).then(|| MaskClass::ALL[order[0]])
    }

    /// Nearest class with ties resolved toward background, then boundary.
    pub fn classify_lenient(&self, rgb: [f64; 3]) -> MaskClass {
        let d = self.distances(rgb);
        let mut best = 0;
        for i in 1..3 {
            if d[i] < d[best] {
                best = i;
            }
        }
        MaskClass::ALL[best]
    }
}

pub fn encode_overlay(mask: &AnnotationMask, palette: &ClassPalette) -> RawImage {
    let data = mask
        .classes
        .iter()
        .flat_map(|&c| palette.color(c).map(f64::from))
        .collect();
    RawImage { width: mask.width, height: mask.height, channels: 3, data }
}

fn pixel_rgb(img: &RawImage, x: usize, y: usize) -> [f64; 3] {
    if img.channels == 1 {
        let v = img.get(x, y, 0);
        [v, v, v]
    } else {
        [img.get(x, y, 0), img.get(x, y, 1), img.get(x, y, 2)]
    }
}

/// Assigns every pixel its nearest palette class; fails on an exact tie.
pub fn decode_overlay(img: &RawImage, palette: &ClassPalette) -> Result<AnnotationMask> {
    let mut mask = AnnotationMask::new(img.width, img.height);
    for y in 0..img.height {
        for x in 0..img.width {
            let class = palette.classify(pixel_rgb(img, x, y)).ok_or(Error::AmbiguousColor { x, y })?;
            mask.set(x, y, class);
        }
    }
    Ok(mask)
}

/// Like [`decode_overlay`] but never fails; used on raw generator output.
pub fn decode_overlay_lenient(img: &RawImage, palette: &ClassPalette) -> AnnotationMask {
    let mut mask = AnnotationMask::new(img.width, img.height);
    for y in 0..img.height {
        for x in 0..img.width {
            mask.set(x, y, palette.classify_lenient(pixel_rgb(img, x, y)));
        }
    }
    mask
}

/// Training sample: network input and target overlay, both at model resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePair {
    pub input: ModelImage,
    pub target: ModelImage,
}

impl ImagePair {
    pub fn from_annotated(image: &RawImage, mask: &AnnotationMask, palette: &ClassPalette) -> Result<Self> {
        if image.width != mask.width || image.height != mask.height {
            return Err(Error::DimensionMismatch(format!(
                "image {}x{} vs mask {}x{}",
                image.width, image.height, mask.width, mask.height
            )));
        }
        Ok(Self {
            input: to_model_range(image),
            target: to_model_range(&encode_overlay(mask, palette)),
        })
    }
}
