//! Pixel grids: scalar images, boolean masks, and per-pixel 3-vector fields.
//!
//! Row-major storage, row 0 at the top of the image. All shapes are
//! `height x width`.

use crate::error::{Error, Result};
use crate::vec3::Vec3;

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn zeros(width: usize, height: usize) -> Self {
        Image {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn same_shape(&self, o: &Image) -> bool {
        self.width == o.width && self.height == o.height
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn filled(width: usize, height: usize, value: bool) -> Self {
        Mask {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn at(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Linear indices of all masked-in pixels, in row-major order.
    pub fn indices(&self) -> Vec<usize> {
        self.data
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }

    /// Tight bounding box (x0, y0, x1, y1) inclusive, or None when empty.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        let mut any = false;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.at(x, y) {
                    any = true;
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
            }
        }
        any.then_some((x0, y0, x1, y1))
    }

    /// Masked pixels with at least one 4-neighbor outside the mask, paired
    /// with the outward in-plane direction (sum of directions toward
    /// unmasked neighbors, normalized). Image borders count as outside.
    pub fn boundary_with_outward(&self) -> Vec<(usize, (f64, f64))> {
        let mut out = Vec::new();
        for y in 0..self.height {
            for x in 0..self.width {
                if !self.at(x, y) {
                    continue;
                }
                let mut dx = 0.0;
                let mut dy = 0.0;
                let mut boundary = false;
                let neighbors: [(isize, isize); 4] = [(1, 0), (-1, 0), (0, 1), (0, -1)];
                for (ox, oy) in neighbors {
                    let nx = x as isize + ox;
                    let ny = y as isize + oy;
                    let outside = nx < 0
                        || ny < 0
                        || nx >= self.width as isize
                        || ny >= self.height as isize
                        || !self.at(nx as usize, ny as usize);
                    if outside {
                        boundary = true;
                        dx += ox as f64;
                        dy += oy as f64;
                    }
                }
                if boundary {
                    let n = (dx * dx + dy * dy).sqrt();
                    if n > 0.0 {
                        out.push((y * self.width + x, (dx / n, dy / n)));
                    }
                }
            }
        }
        out
    }

    /// Pairs (p, q) of horizontally or vertically adjacent masked pixels.
    pub fn neighbor_pairs(&self) -> Vec<(usize, usize)> {
        let mut pairs = Vec::new();
        for y in 0..self.height {
            for x in 0..self.width {
                if !self.at(x, y) {
                    continue;
                }
                let p = y * self.width + x;
                if x + 1 < self.width && self.at(x + 1, y) {
                    pairs.push((p, p + 1));
                }
                if y + 1 < self.height && self.at(x, y + 1) {
                    pairs.push((p, p + self.width));
                }
            }
        }
        pairs
    }
}

/// Per-pixel 3-vector field (normals, scaled normals).
#[derive(Debug, Clone, PartialEq)]
pub struct Field3 {
    pub width: usize,
    pub height: usize,
    pub data: Vec<Vec3>,
}

impl Field3 {
    pub fn zeros(width: usize, height: usize) -> Self {
        Field3 {
            width,
            height,
            data: vec![Vec3::zero(); width * height],
        }
    }

    pub fn at(&self, x: usize, y: usize) -> Vec3 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: Vec3) {
        self.data[y * self.width + x] = v;
    }
}

pub fn check_same_shape(
    aw: usize,
    ah: usize,
    bw: usize,
    bh: usize,
    what: &str,
) -> Result<()> {
    if aw != bw || ah != bh {
        return Err(Error::ShapeMismatch(format!(
            "{what}: {aw}x{ah} vs {bw}x{bh}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn boundary_outward_points_away_from_disc() {
        let mut m = Mask::filled(9, 9, false);
        for y in 0..9usize {
            for x in 0..9usize {
                let dx = x as f64 - 4.0;
                let dy = y as f64 - 4.0;
                if dx * dx + dy * dy <= 9.0 {
                    m.set(x, y, true);
                }
            }
        }
        let boundary = m.boundary_with_outward();
        assert!(!boundary.is_empty());
        for (idx, (dx, dy)) in boundary {
            let x = (idx % 9) as f64 - 4.0;
            let y = (idx / 9) as f64 - 4.0;
            // Outward direction should not point back toward the center.
            assert!(
                dx * x + dy * y >= 0.0,
                "inward-pointing contour direction at ({x},{y})"
            );
        }
    }

    #[test]
    fn neighbor_pairs_inside_mask_only() {
        let mut m = Mask::filled(3, 1, false);
        m.set(0, 0, true);
        m.set(2, 0, true);
        assert!(m.neighbor_pairs().is_empty());
        m.set(1, 0, true);
        assert_eq!(m.neighbor_pairs().len(), 2);
    }
}
