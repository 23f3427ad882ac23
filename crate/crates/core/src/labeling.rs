//! Connected-component labeling on pixel grids.

use std::collections::VecDeque;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connectivity {
    Four,
    Eight,
}

impl Connectivity {
    pub fn offsets(self) -> &'static [(i64, i64)] {
        match self {
            Connectivity::Four => &[(1, 0), (-1, 0), (0, 1), (0, -1)],
            Connectivity::Eight => &[(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1)],
        }
    }
}

/// Component labels for every pixel: `0` for pixels outside the predicate,
/// `1..=count` for components in raster order of their first pixel.
#[derive(Debug, Clone)]
pub struct Labels {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u32>,
    pub count: usize,
}

impl Labels {
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    /// Pixel count per component, indexed by `label - 1`.
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.count];
        for &l in &self.labels {
            if l > 0 {
                sizes[l as usize - 1] += 1;
            }
        }
        sizes
    }

    /// Whether each component has a pixel on the image border, indexed by `label - 1`.
    pub fn touches_border(&self) -> Vec<bool> {
        let mut touch = vec![false; self.count];
        let (w, h) = (self.width, self.height);
        let mut mark = |x: usize, y: usize| {
            let l = self.labels[y * w + x];
            if l > 0 {
                touch[l as usize - 1] = true;
            }
        };
        for x in 0..w {
            mark(x, 0);
            mark(x, h - 1);
        }
        for y in 0..h {
            mark(0, y);
            mark(w - 1, y);
        }
        touch
    }
}

/// Breadth-first labeling of pixels where `inside(x, y)` holds.
pub fn label_components(
    width: usize,
    height: usize,
    connectivity: Connectivity,
    inside: impl Fn(usize, usize) -> bool,
) -> Labels {
    let mut labels = vec![0u32; width * height];
    let mut count = 0u32;
    let mut queue = VecDeque::new();
    for y0 in 0..height {
        for x0 in 0..width {
            if labels[y0 * width + x0] != 0 || !inside(x0, y0) {
                continue;
            }
            count += 1;
            labels[y0 * width + x0] = count;
            queue.push_back((x0, y0));
            while let Some((x, y)) = queue.pop_front() {
                for &(dx, dy) in connectivity.offsets() {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx < 0 || ny < 0 || nx >= width as i64 || ny >= height as i64 {
                        continue;
                    }
                    let (nx, ny) = (nx as usize, ny as usize);
                    let idx = ny * width + nx;
                    if labels[idx] == 0 && inside(nx, ny) {
                        labels[idx] = count;
                        queue.push_back((nx, ny));
                    }
                }
            }
        }
    }
    Labels { width, height, labels, count: count as usize }
}
